//! `XGCKPT1` checkpoint files: magic line, little-endian u64 length, JSON
//! metadata, then the declared arrays as little-endian f64.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{f64_bytes, BackboneConfig, Prompt};
use super::train::OptState;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub const MAGIC: &[u8] = b"XGCKPT1\n";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Backbone(Vec<f64>),
    Prompt(Prompt),
    Factorized {
        languages: BTreeMap<String, Prompt>,
        tasks: BTreeMap<String, Prompt>,
    },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Backbone(_) => "backbone",
            Payload::Prompt(_) => "prompt",
            Payload::Factorized { .. } => "factorized",
        }
    }

    pub fn as_prompt(&self) -> Result<&Prompt> {
        match self {
            Payload::Prompt(p) => Ok(p),
            other => Err(Error::Input(format!("checkpoint holds a {} payload, not a prompt", other.kind()))),
        }
    }

    pub fn as_backbone(&self) -> Result<&[f64]> {
        match self {
            Payload::Backbone(p) => Ok(p),
            other => Err(Error::Input(format!("checkpoint holds a {} payload, not a backbone", other.kind()))),
        }
    }

    fn arrays(&self) -> Vec<(String, usize, usize, &[f64])> {
        match self {
            Payload::Backbone(p) => vec![("backbone".into(), 1, p.len(), &p[..])],
            Payload::Prompt(p) => vec![("prompt".into(), p.len, p.d_model, &p.data[..])],
            Payload::Factorized { languages, tasks } => languages
                .iter()
                .map(|(k, p)| (format!("language:{k}"), p.len, p.d_model, &p.data[..]))
                .chain(tasks.iter().map(|(k, p)| (format!("task:{k}"), p.len, p.d_model, &p.data[..])))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub payload: Payload,
    pub config: BackboneConfig,
    /// fingerprint of the frozen backbone (prompt payloads) or of the
    /// payload itself (backbone payloads)
    pub backbone_fingerprint: String,
    /// data-source position right after this step
    pub source_state: serde_json::Value,
    /// mean batch loss of this step
    pub loss: f64,
    pub data_hash: String,
    /// optimizer moments, one slot per trained tensor group; empty for SGD
    pub optimizer: Vec<OptState>,
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    step: u64,
    kind: String,
    config: BackboneConfig,
    config_hash: String,
    backbone_fingerprint: String,
    source_state: serde_json::Value,
    loss: f64,
    data_hash: String,
    /// step counters of the optimizer slots
    #[serde(default)]
    optimizer_steps: Vec<u64>,
    arrays: Vec<ArrayMeta>,
}

pub fn config_hash(cfg: &BackboneConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = self.payload.arrays();
        for (i, o) in self.optimizer.iter().enumerate() {
            arrays.push((format!("adam_m:{i}"), 1, o.m.len(), &o.m[..]));
            arrays.push((format!("adam_v:{i}"), 1, o.v.len(), &o.v[..]));
        }
        let meta = Meta {
            step: self.step,
            kind: self.payload.kind().into(),
            config: self.config,
            config_hash: config_hash(&self.config),
            backbone_fingerprint: self.backbone_fingerprint.clone(),
            source_state: self.source_state.clone(),
            loss: self.loss,
            data_hash: self.data_hash.clone(),
            optimizer_steps: self.optimizer.iter().map(|o| o.t).collect(),
            arrays: arrays
                .iter()
                .map(|(name, rows, cols, _)| ArrayMeta {
                    name: name.clone(),
                    rows: *rows,
                    cols: *cols,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, _, data) in arrays {
            out.extend_from_slice(&f64_bytes(data));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing XGCKPT1 magic"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header"));
        }
        let n = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < n {
            return Err(bad("truncated metadata"));
        }
        let meta: Meta = serde_json::from_slice(&rest[..n])?;
        if meta.config_hash != config_hash(&meta.config) {
            return Err(bad("config hash mismatch"));
        }
        let mut data = &rest[n..];
        let mut arrays = Vec::with_capacity(meta.arrays.len());
        for a in &meta.arrays {
            let len = a.rows * a.cols;
            if data.len() < len * 8 {
                return Err(bad(&format!("array {} truncated", a.name)));
            }
            let vals: Vec<f64> = data[..len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[len * 8..];
            arrays.push((a, vals));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let n_opt = meta.optimizer_steps.len();
        if arrays.len() < 2 * n_opt {
            return Err(bad("missing optimizer arrays"));
        }
        let opt_arrays = arrays.split_off(arrays.len() - 2 * n_opt);
        let mut optimizer = Vec::with_capacity(n_opt);
        for (i, pair) in opt_arrays.chunks_exact(2).enumerate() {
            let (am, m) = &pair[0];
            let (av, v) = &pair[1];
            if am.name != format!("adam_m:{i}") || av.name != format!("adam_v:{i}") || m.len() != v.len() {
                return Err(bad("malformed optimizer arrays"));
            }
            optimizer.push(OptState {
                t: meta.optimizer_steps[i],
                m: m.clone(),
                v: v.clone(),
            });
        }
        let payload = match meta.kind.as_str() {
            "backbone" => match arrays.pop() {
                Some((_, v)) if arrays.is_empty() => Payload::Backbone(v),
                _ => return Err(bad("backbone payload needs exactly one array")),
            },
            "prompt" => match arrays.pop() {
                Some((a, v)) if arrays.is_empty() => Payload::Prompt(Prompt::from_data(a.rows, a.cols, v)?),
                _ => return Err(bad("prompt payload needs exactly one array")),
            },
            "factorized" => {
                let mut languages = BTreeMap::new();
                let mut tasks = BTreeMap::new();
                for (a, v) in arrays {
                    let p = Prompt::from_data(a.rows, a.cols, v)?;
                    if let Some(k) = a.name.strip_prefix("language:") {
                        languages.insert(k.to_string(), p);
                    } else if let Some(k) = a.name.strip_prefix("task:") {
                        tasks.insert(k.to_string(), p);
                    } else {
                        return Err(bad(&format!("unexpected array {}", a.name)));
                    }
                }
                Payload::Factorized { languages, tasks }
            }
            other => return Err(bad(&format!("unknown payload kind {other}"))),
        };
        Ok(Self {
            step: meta.step,
            payload,
            config: meta.config,
            backbone_fingerprint: meta.backbone_fingerprint,
            source_state: meta.source_state,
            loss: meta.loss,
            data_hash: meta.data_hash,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
