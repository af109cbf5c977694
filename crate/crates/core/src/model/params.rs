use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{sha256_hex, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// longest token sequence either side accepts (prompt rows excluded)
    pub max_len: usize,
}

impl BackboneConfig {
    /// d_model 64, 2+2 layers, 4 heads, vocab 512.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 256,
            vocab_size,
            max_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, v, l) = (self.d_model, self.ffn_dim, self.vocab_size, self.max_len);
        let ffn = 2 * d * f + f + d;
        let enc_layer = 2 * (2 * d) + 4 * d * d + ffn;
        let dec_layer = 3 * (2 * d) + 8 * d * d + ffn;
        v * d + 2 * l * d + self.n_enc_layers * enc_layer + self.n_dec_layers * dec_layer + 2 * (2 * d) + d * v + v
    }
}

/// A slice of the flat parameter vector viewed as a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn of<'a>(&self, data: &'a [f64]) -> &'a [f64] {
        &data[self.range()]
    }

    pub fn of_mut<'a>(&self, data: &'a mut [f64]) -> &'a mut [f64] {
        &mut data[self.range()]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LnIdx {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIdx {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayerIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross: AttnIdx,
    pub ln3: LnIdx,
    pub ffn: FfnIdx,
}

/// Where each named tensor lives in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: Tensor,
    pub enc_pos: Tensor,
    pub dec_pos: Tensor,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: LnIdx,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub total: usize,
    /// (tensor, init kind) in declaration order
    pub entries: Vec<(String, Tensor, Init)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

struct Builder {
    offset: usize,
    entries: Vec<(String, Tensor, Init)>,
}

impl Builder {
    fn take(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Tensor {
        let t = Tensor {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += rows * cols;
        self.entries.push((name, t, init));
        t
    }

    fn ln(&mut self, name: &str, d: usize) -> LnIdx {
        LnIdx {
            gain: self.take(format!("{name}.gain"), 1, d, Init::Ones),
            bias: self.take(format!("{name}.bias"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIdx {
        let a = 1.0 / (d as f64).sqrt();
        AttnIdx {
            wq: self.take(format!("{name}.wq"), d, d, Init::Uniform(a)),
            wk: self.take(format!("{name}.wk"), d, d, Init::Uniform(a)),
            wv: self.take(format!("{name}.wv"), d, d, Init::Uniform(a)),
            wo: self.take(format!("{name}.wo"), d, d, Init::Uniform(a)),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            w1: self.take(format!("{name}.w1"), d, f, Init::Uniform(1.0 / (d as f64).sqrt())),
            b1: self.take(format!("{name}.b1"), 1, f, Init::Zeros),
            w2: self.take(format!("{name}.w2"), f, d, Init::Uniform(1.0 / (f as f64).sqrt())),
            b2: self.take(format!("{name}.b2"), 1, d, Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let (d, f, v, l) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size, cfg.max_len);
        let mut b = Builder {
            offset: 0,
            entries: Vec::new(),
        };
        let tok_emb = b.take("tok_emb".into(), v, d, Init::Uniform(0.5));
        let enc_pos = b.take("enc_pos".into(), l, d, Init::Uniform(0.1));
        let dec_pos = b.take("dec_pos".into(), l, d, Init::Uniform(0.1));
        let enc = (0..cfg.n_enc_layers)
            .map(|i| EncLayerIdx {
                ln1: b.ln(&format!("enc{i}.ln1"), d),
                attn: b.attn(&format!("enc{i}.attn"), d),
                ln2: b.ln(&format!("enc{i}.ln2"), d),
                ffn: b.ffn(&format!("enc{i}.ffn"), d, f),
            })
            .collect();
        let enc_ln = b.ln("enc.ln", d);
        let dec = (0..cfg.n_dec_layers)
            .map(|i| DecLayerIdx {
                ln1: b.ln(&format!("dec{i}.ln1"), d),
                self_attn: b.attn(&format!("dec{i}.self"), d),
                ln2: b.ln(&format!("dec{i}.ln2"), d),
                cross: b.attn(&format!("dec{i}.cross"), d),
                ln3: b.ln(&format!("dec{i}.ln3"), d),
                ffn: b.ffn(&format!("dec{i}.ffn"), d, f),
            })
            .collect();
        let dec_ln = b.ln("dec.ln", d);
        let w_out = b.take("w_out".into(), d, v, Init::Uniform(0.5 / (d as f64).sqrt()));
        let b_out = b.take("b_out".into(), 1, v, Init::Zeros);
        Self {
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            w_out,
            b_out,
            total: b.offset,
            entries: b.entries,
        }
    }
}

/// Frozen-or-trainable encoder-decoder parameters.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub frozen: bool,
}

impl PartialEq for Backbone {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.frozen == other.frozen && self.params == other.params
    }
}

pub fn init_backbone(config: BackboneConfig, seed: u64) -> Result<Backbone> {
    config.validate()?;
    let layout = Layout::new(&config);
    let mut params = vec![0.0; layout.total];
    let mut rng = Rng::seed_from_u64(seed);
    for (_, t, init) in &layout.entries {
        let slot = t.of_mut(&mut params);
        match *init {
            Init::Uniform(a) => slot.iter_mut().for_each(|x| *x = rng.gen_range(-a..=a)),
            Init::Ones => slot.fill(1.0),
            Init::Zeros => slot.fill(0.0),
        }
    }
    Ok(Backbone {
        config,
        layout,
        params,
        frozen: false,
    })
}

impl Backbone {
    pub fn from_params(config: BackboneConfig, params: Vec<f64>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Format(format!(
                "backbone expects {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            frozen,
        })
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&f64_bytes(&self.params))
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn embedding(&self, id: u32) -> &[f64] {
        let d = self.config.d_model;
        let e = self.layout.tok_emb.of(&self.params);
        &e[id as usize * d..(id as usize + 1) * d]
    }
}

pub fn f64_bytes(xs: &[f64]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Soft prompt: `len × d_model` virtual-token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub len: usize,
    pub d_model: usize,
    pub data: Vec<f64>,
}

impl Prompt {
    pub fn zeros(len: usize, d_model: usize) -> Self {
        Self {
            len,
            d_model,
            data: vec![0.0; len * d_model],
        }
    }

    pub fn from_data(len: usize, d_model: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * d_model {
            return Err(Error::Input(format!(
                "prompt data has {} values, expected {len}×{d_model}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("prompt contains non-finite values".into()));
        }
        Ok(Self { len, d_model, data })
    }

    /// Rows copied from the embeddings of uniformly sampled vocabulary ids.
    pub fn sample_vocab(backbone: &Backbone, len: usize, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let v = backbone.config.vocab_size as u32;
        let mut data = Vec::with_capacity(len * backbone.config.d_model);
        for _ in 0..len {
            data.extend_from_slice(backbone.embedding(rng.gen_range(0..v)));
        }
        Self {
            len,
            d_model: backbone.config.d_model,
            data,
        }
    }

    /// Uniform in `[-scale, scale]`.
    pub fn random(len: usize, d_model: usize, scale: f64, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        Self {
            len,
            d_model,
            data: (0..len * d_model).map(|_| rng.gen_range(-scale..=scale)).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&f64_bytes(&self.data))
    }

    /// Column means over rows.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d_model];
        for i in 0..self.len {
            for (a, b) in m.iter_mut().zip(self.row(i)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|x| *x /= self.len.max(1) as f64);
        m
    }
}

pub const FACTOR_HALF_LEN: usize = 50;

/// Language half first, task half second.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPrompt {
    pub language: Prompt,
    pub task: Prompt,
}

impl FactorizedPrompt {
    pub fn new(language: Prompt, task: Prompt) -> Result<Self> {
        if language.d_model != task.d_model {
            return Err(Error::Input(format!(
                "sub-prompt widths differ: {} vs {}",
                language.d_model, task.d_model
            )));
        }
        Ok(Self { language, task })
    }
}

/// Row-wise concatenation `[language ; task]`.
pub fn compose_prompt(f: &FactorizedPrompt) -> Result<Prompt> {
    if f.language.d_model != f.task.d_model {
        return Err(Error::Input("sub-prompt widths differ".into()));
    }
    let mut data = f.language.data.clone();
    data.extend_from_slice(&f.task.data);
    Ok(Prompt {
        len: f.language.len + f.task.len,
        d_model: f.language.d_model,
        data,
    })
}

/// Replaces the language half; the task half is carried over untouched.
pub fn swap_language(f: &FactorizedPrompt, target_half: &Prompt) -> Result<FactorizedPrompt> {
    if target_half.d_model != f.language.d_model || target_half.len != f.language.len {
        return Err(Error::Input(format!(
            "language half shape {}×{} does not match {}×{}",
            target_half.len, target_half.d_model, f.language.len, f.language.d_model
        )));
    }
    Ok(FactorizedPrompt {
        language: target_half.clone(),
        task: f.task.clone(),
    })
}
