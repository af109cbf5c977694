//! Teacher-forced forward pass, exact backward pass and the incremental
//! decoder used at inference.

use super::linalg::{acc_a_bt, acc_at_b, add_into, gelu, gelu_grad, log_softmax, matmul, softmax};
use super::params::{AttnIdx, Backbone, FfnIdx, LnIdx, Prompt, Tensor};
use crate::error::{Error, Result};
use crate::tasks::TaskExample;
use crate::tokenizer::{EOS_ID, PAD_ID};

const LN_EPS: f64 = 1e-5;

struct LnCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

fn ln_fwd(p: &[f64], idx: &LnIdx, x: &[f64], n: usize, d: usize) -> (Vec<f64>, LnCache) {
    let g = idx.gain.of(p);
    let b = idx.bias.of(p);
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv[i] = s;
        for j in 0..d {
            let h = (row[j] - mu) * s;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, inv })
}

fn ln_bwd(p: &[f64], idx: &LnIdx, c: &LnCache, dy: &[f64], n: usize, d: usize, gp: Option<&mut [f64]>) -> Vec<f64> {
    let g = idx.gain.of(p);
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let xh = &c.xhat[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let gy = dyr[j] * g[j];
            m1 += gy;
            m2 += gy * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            dx[i * d + j] = c.inv[i] * (dyr[j] * g[j] - m1 - xh[j] * m2);
        }
    }
    if let Some(gp) = gp {
        let dg = idx.gain.of_mut(gp);
        for i in 0..n {
            for j in 0..d {
                dg[j] += dy[i * d + j] * c.xhat[i * d + j];
            }
        }
        let db = idx.bias.of_mut(gp);
        for i in 0..n {
            add_into(db, &dy[i * d..(i + 1) * d]);
        }
    }
    dx
}

struct AttnCache {
    xq: Vec<f64>,
    xkv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × nq × nk
    probs: Vec<f64>,
    ctx: Vec<f64>,
    nq: usize,
    nk: usize,
}

struct Shape {
    d: usize,
    heads: usize,
}

impl Shape {
    fn dh(&self) -> usize {
        self.d / self.heads
    }
}

fn attend(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, sh: &Shape, causal_offset: Option<usize>) -> (Vec<f64>, Vec<f64>) {
    let (d, dh) = (sh.d, sh.dh());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; sh.heads * nq * nk];
    let mut ctx = vec![0.0; nq * d];
    for h in 0..sh.heads {
        let o = h * dh;
        for i in 0..nq {
            // query i may see keys 0..=i+offset when causal
            let visible = causal_offset.map_or(nk, |off| (i + off + 1).min(nk));
            if visible == 0 {
                continue;
            }
            let qi = &q[i * d + o..i * d + o + dh];
            let row = &mut probs[(h * nq + i) * nk..(h * nq + i) * nk + visible];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k[j * d + o..j * d + o + dh];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax(row);
            let ci = &mut ctx[i * d + o..i * d + o + dh];
            for (j, &a) in row.iter().enumerate() {
                let vj = &v[j * d + o..j * d + o + dh];
                for (c, &vv) in ci.iter_mut().zip(vj) {
                    *c += a * vv;
                }
            }
        }
    }
    (probs, ctx)
}

fn attn_fwd(p: &[f64], idx: &AttnIdx, xq: &[f64], nq: usize, xkv: &[f64], nk: usize, sh: &Shape, causal: bool) -> (Vec<f64>, AttnCache) {
    let d = sh.d;
    let q = matmul(xq, nq, d, idx.wq.of(p), d);
    let k = matmul(xkv, nk, d, idx.wk.of(p), d);
    let v = matmul(xkv, nk, d, idx.wv.of(p), d);
    let (probs, ctx) = attend(&q, &k, &v, nq, nk, sh, causal.then_some(0));
    let out = matmul(&ctx, nq, d, idx.wo.of(p), d);
    (
        out,
        AttnCache {
            xq: xq.to_vec(),
            xkv: xkv.to_vec(),
            q,
            k,
            v,
            probs,
            ctx,
            nq,
            nk,
        },
    )
}

/// Returns (d xq, d xkv).
fn attn_bwd(p: &[f64], idx: &AttnIdx, c: &AttnCache, dout: &[f64], sh: &Shape, mut gp: Option<&mut [f64]>) -> (Vec<f64>, Vec<f64>) {
    let (d, dh, nq, nk) = (sh.d, sh.dh(), c.nq, c.nk);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dctx = vec![0.0; nq * d];
    acc_a_bt(dout, nq, d, idx.wo.of(p), d, &mut dctx);
    if let Some(gp) = gp.as_deref_mut() {
        acc_at_b(&c.ctx, nq, d, dout, d, idx.wo.of_mut(gp));
    }
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut da = vec![0.0; nk];
    for h in 0..sh.heads {
        let o = h * dh;
        for i in 0..nq {
            let a = &c.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let dci = &dctx[i * d + o..i * d + o + dh];
            let mut dot = 0.0;
            for j in 0..nk {
                if a[j] == 0.0 {
                    da[j] = 0.0;
                    continue;
                }
                let vj = &c.v[j * d + o..j * d + o + dh];
                da[j] = dci.iter().zip(vj).map(|(x, y)| x * y).sum();
                dot += a[j] * da[j];
                let dvj = &mut dv[j * d + o..j * d + o + dh];
                for (t, &g) in dvj.iter_mut().zip(dci) {
                    *t += a[j] * g;
                }
            }
            for j in 0..nk {
                if a[j] == 0.0 {
                    continue;
                }
                let ds = a[j] * (da[j] - dot) * scale;
                for t in 0..dh {
                    dq[i * d + o + t] += ds * c.k[j * d + o + t];
                    dk[j * d + o + t] += ds * c.q[i * d + o + t];
                }
            }
        }
    }
    let mut dxq = vec![0.0; nq * d];
    acc_a_bt(&dq, nq, d, idx.wq.of(p), d, &mut dxq);
    let mut dxkv = vec![0.0; nk * d];
    acc_a_bt(&dk, nk, d, idx.wk.of(p), d, &mut dxkv);
    acc_a_bt(&dv, nk, d, idx.wv.of(p), d, &mut dxkv);
    if let Some(gp) = gp {
        acc_at_b(&c.xq, nq, d, &dq, d, idx.wq.of_mut(gp));
        acc_at_b(&c.xkv, nk, d, &dk, d, idx.wk.of_mut(gp));
        acc_at_b(&c.xkv, nk, d, &dv, d, idx.wv.of_mut(gp));
    }
    (dxq, dxkv)
}

struct FfnCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn ffn_fwd(p: &[f64], idx: &FfnIdx, x: &[f64], n: usize, d: usize, f: usize) -> (Vec<f64>, FfnCache) {
    let mut pre = matmul(x, n, d, idx.w1.of(p), f);
    let b1 = idx.b1.of(p);
    for i in 0..n {
        add_into(&mut pre[i * f..(i + 1) * f], b1);
    }
    let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
    let mut out = matmul(&act, n, f, idx.w2.of(p), d);
    let b2 = idx.b2.of(p);
    for i in 0..n {
        add_into(&mut out[i * d..(i + 1) * d], b2);
    }
    (out, FfnCache { x: x.to_vec(), pre, act })
}

fn ffn_bwd(p: &[f64], idx: &FfnIdx, c: &FfnCache, dout: &[f64], n: usize, d: usize, f: usize, gp: Option<&mut [f64]>) -> Vec<f64> {
    let mut dact = vec![0.0; n * f];
    acc_a_bt(dout, n, d, idx.w2.of(p), f, &mut dact);
    let dpre: Vec<f64> = dact.iter().zip(&c.pre).map(|(g, &z)| g * gelu_grad(z)).collect();
    let mut dx = vec![0.0; n * d];
    acc_a_bt(&dpre, n, f, idx.w1.of(p), d, &mut dx);
    if let Some(gp) = gp {
        acc_at_b(&c.act, n, f, dout, d, idx.w2.of_mut(gp));
        for i in 0..n {
            add_into(idx.b2.of_mut(gp), &dout[i * d..(i + 1) * d]);
        }
        acc_at_b(&c.x, n, d, &dpre, f, idx.w1.of_mut(gp));
        for i in 0..n {
            add_into(idx.b1.of_mut(gp), &dpre[i * f..(i + 1) * f]);
        }
    }
    dx
}

struct EncLayerCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    ffn: FfnCache,
}

struct DecLayerCache {
    ln1: LnCache,
    self_attn: AttnCache,
    ln2: LnCache,
    cross: AttnCache,
    ln3: LnCache,
    ffn: FfnCache,
}

/// Encoder input: prompt rows verbatim, then token embedding plus position
/// for each text token (text positions start at 0).
fn embed_encoder(bb: &Backbone, prompt: Option<&[f64]>, ids: &[u32]) -> Vec<f64> {
    let d = bb.config.d_model;
    let p = &bb.params;
    let mut x = Vec::with_capacity(prompt.map_or(0, <[f64]>::len) + ids.len() * d);
    if let Some(rows) = prompt {
        x.extend_from_slice(rows);
    }
    let pos = bb.layout.enc_pos.of(p);
    for (i, &t) in ids.iter().enumerate() {
        let e = bb.embedding(t);
        x.extend(e.iter().zip(&pos[i * d..(i + 1) * d]).map(|(a, b)| a + b));
    }
    x
}

fn embed_decoder(bb: &Backbone, ids: &[u32]) -> Vec<f64> {
    let d = bb.config.d_model;
    let pos = bb.layout.dec_pos.of(&bb.params);
    let mut x = Vec::with_capacity(ids.len() * d);
    for (i, &t) in ids.iter().enumerate() {
        x.extend(bb.embedding(t).iter().zip(&pos[i * d..(i + 1) * d]).map(|(a, b)| a + b));
    }
    x
}

fn shape(bb: &Backbone) -> Shape {
    Shape {
        d: bb.config.d_model,
        heads: bb.config.n_heads,
    }
}

fn encode_fwd(bb: &Backbone, x0: Vec<f64>, n: usize) -> (Vec<f64>, Vec<EncLayerCache>, LnCache) {
    let (p, sh, f) = (&bb.params[..], shape(bb), bb.config.ffn_dim);
    let d = sh.d;
    let mut x = x0;
    let mut caches = Vec::with_capacity(bb.layout.enc.len());
    for l in &bb.layout.enc {
        let (h, ln1) = ln_fwd(p, &l.ln1, &x, n, d);
        let (a, attn) = attn_fwd(p, &l.attn, &h, n, &h, n, &sh, false);
        add_into(&mut x, &a);
        let (h2, ln2) = ln_fwd(p, &l.ln2, &x, n, d);
        let (m, ffn) = ffn_fwd(p, &l.ffn, &h2, n, d, f);
        add_into(&mut x, &m);
        caches.push(EncLayerCache { ln1, attn, ln2, ffn });
    }
    let (out, fin) = ln_fwd(p, &bb.layout.enc_ln, &x, n, d);
    (out, caches, fin)
}

fn encode_bwd(bb: &Backbone, caches: &[EncLayerCache], fin: &LnCache, dout: &[f64], n: usize, mut gp: Option<&mut [f64]>) -> Vec<f64> {
    let (p, sh, f) = (&bb.params[..], shape(bb), bb.config.ffn_dim);
    let d = sh.d;
    let mut dx = ln_bwd(p, &bb.layout.enc_ln, fin, dout, n, d, gp.as_deref_mut());
    for (l, c) in bb.layout.enc.iter().zip(caches).rev() {
        let dh2 = ffn_bwd(p, &l.ffn, &c.ffn, &dx, n, d, f, gp.as_deref_mut());
        let d2 = ln_bwd(p, &l.ln2, &c.ln2, &dh2, n, d, gp.as_deref_mut());
        add_into(&mut dx, &d2);
        let (dq, dkv) = attn_bwd(p, &l.attn, &c.attn, &dx, &sh, gp.as_deref_mut());
        let mut dh = dq;
        add_into(&mut dh, &dkv);
        let d1 = ln_bwd(p, &l.ln1, &c.ln1, &dh, n, d, gp.as_deref_mut());
        add_into(&mut dx, &d1);
    }
    dx
}

fn decode_fwd(bb: &Backbone, y0: Vec<f64>, t: usize, mem: &[f64], m: usize) -> (Vec<f64>, Vec<DecLayerCache>, LnCache) {
    let (p, sh, f) = (&bb.params[..], shape(bb), bb.config.ffn_dim);
    let d = sh.d;
    let mut y = y0;
    let mut caches = Vec::with_capacity(bb.layout.dec.len());
    for l in &bb.layout.dec {
        let (h, ln1) = ln_fwd(p, &l.ln1, &y, t, d);
        let (a, self_attn) = attn_fwd(p, &l.self_attn, &h, t, &h, t, &sh, true);
        add_into(&mut y, &a);
        let (h2, ln2) = ln_fwd(p, &l.ln2, &y, t, d);
        let (c, cross) = attn_fwd(p, &l.cross, &h2, t, mem, m, &sh, false);
        add_into(&mut y, &c);
        let (h3, ln3) = ln_fwd(p, &l.ln3, &y, t, d);
        let (o, ffn) = ffn_fwd(p, &l.ffn, &h3, t, d, f);
        add_into(&mut y, &o);
        caches.push(DecLayerCache {
            ln1,
            self_attn,
            ln2,
            cross,
            ln3,
            ffn,
        });
    }
    let (z, fin) = ln_fwd(p, &bb.layout.dec_ln, &y, t, d);
    (z, caches, fin)
}

/// Returns (d y0, d memory).
fn decode_bwd(bb: &Backbone, caches: &[DecLayerCache], fin: &LnCache, dz: &[f64], t: usize, m: usize, mut gp: Option<&mut [f64]>) -> (Vec<f64>, Vec<f64>) {
    let (p, sh, f) = (&bb.params[..], shape(bb), bb.config.ffn_dim);
    let d = sh.d;
    let mut dy = ln_bwd(p, &bb.layout.dec_ln, fin, dz, t, d, gp.as_deref_mut());
    let mut dmem = vec![0.0; m * d];
    for (l, c) in bb.layout.dec.iter().zip(caches).rev() {
        let dh3 = ffn_bwd(p, &l.ffn, &c.ffn, &dy, t, d, f, gp.as_deref_mut());
        add_into(&mut dy, &ln_bwd(p, &l.ln3, &c.ln3, &dh3, t, d, gp.as_deref_mut()));
        let (dq, dkv) = attn_bwd(p, &l.cross, &c.cross, &dy, &sh, gp.as_deref_mut());
        add_into(&mut dmem, &dkv);
        add_into(&mut dy, &ln_bwd(p, &l.ln2, &c.ln2, &dq, t, d, gp.as_deref_mut()));
        let (dq, dkv) = attn_bwd(p, &l.self_attn, &c.self_attn, &dy, &sh, gp.as_deref_mut());
        let mut dh = dq;
        add_into(&mut dh, &dkv);
        add_into(&mut dy, &ln_bwd(p, &l.ln1, &c.ln1, &dh, t, d, gp.as_deref_mut()));
    }
    (dy, dmem)
}

/// Inputs clipped to `max_len`, targets to `max_len - 1` (room for EOS).
pub fn clip_to_config(bb: &Backbone, ex: &TaskExample) -> TaskExample {
    let l = bb.config.max_len;
    crate::corpus::clip_example(ex, l, l.saturating_sub(1))
}

fn check_ids(bb: &Backbone, ex: &TaskExample) -> Result<()> {
    let v = bb.config.vocab_size as u32;
    if let Some(&bad) = ex.inputs.iter().chain(&ex.targets).find(|&&t| t >= v) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {v}")));
    }
    Ok(())
}

fn check_prompt(bb: &Backbone, prompt: Option<&Prompt>) -> Result<()> {
    if let Some(pr) = prompt {
        if pr.d_model != bb.config.d_model {
            return Err(Error::Input(format!(
                "prompt width {} does not match d_model {}",
                pr.d_model, bb.config.d_model
            )));
        }
    }
    Ok(())
}

/// Gradient sinks for one backward pass.
pub struct GradSink<'a> {
    pub params: Option<&'a mut [f64]>,
    pub prompt: Option<&'a mut [f64]>,
}

/// Summed cross-entropy of one example; if `sink` is given, gradients of
/// `scale × summed CE` are accumulated into it.
fn example_pass(bb: &Backbone, prompt: Option<&Prompt>, ex: &TaskExample, scale: f64, sink: Option<&mut GradSink>) -> (f64, usize) {
    let ex = clip_to_config(bb, ex);
    let cfg = &bb.config;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let p = &bb.params[..];
    let plen = prompt.map_or(0, |pr| pr.len);
    let n = plen + ex.inputs.len();
    let x0 = embed_encoder(bb, prompt.map(|pr| &pr.data[..]), &ex.inputs);
    let (mem, enc_caches, enc_fin) = encode_fwd(bb, x0, n);

    let mut dec_in = Vec::with_capacity(ex.targets.len() + 1);
    dec_in.push(PAD_ID);
    dec_in.extend_from_slice(&ex.targets);
    let mut labels = ex.targets.clone();
    labels.push(EOS_ID);
    let t = dec_in.len();
    let y0 = embed_decoder(bb, &dec_in);
    let (z, dec_caches, dec_fin) = decode_fwd(bb, y0, t, &mem, n);

    let mut logits = matmul(&z, t, d, bb.layout.w_out.of(p), v);
    let b_out = bb.layout.b_out.of(p);
    let mut loss = 0.0;
    for i in 0..t {
        let row = &mut logits[i * v..(i + 1) * v];
        add_into(row, b_out);
        log_softmax(row);
        loss -= row[labels[i] as usize];
    }
    let Some(sink) = sink else {
        return (loss, t);
    };

    // logits now hold log-probs; turn them into d(scale·CE)/d logits
    let mut dlogits = logits;
    for i in 0..t {
        let row = &mut dlogits[i * v..(i + 1) * v];
        for x in row.iter_mut() {
            *x = x.exp() * scale;
        }
        row[labels[i] as usize] -= scale;
    }
    let mut dz = vec![0.0; t * d];
    acc_a_bt(&dlogits, t, v, bb.layout.w_out.of(p), d, &mut dz);
    if let Some(gp) = sink.params.as_deref_mut() {
        acc_at_b(&z, t, d, &dlogits, v, bb.layout.w_out.of_mut(gp));
        let db = bb.layout.b_out.of_mut(gp);
        for i in 0..t {
            add_into(db, &dlogits[i * v..(i + 1) * v]);
        }
    }
    let (dy0, dmem) = decode_bwd(bb, &dec_caches, &dec_fin, &dz, t, n, sink.params.as_deref_mut());
    let dx0 = encode_bwd(bb, &enc_caches, &enc_fin, &dmem, n, sink.params.as_deref_mut());

    if let Some(gp) = sink.params.as_deref_mut() {
        scatter_embeddings(bb, gp, &dec_in, &dy0, bb.layout.dec_pos);
        scatter_embeddings(bb, gp, &ex.inputs, &dx0[plen * d..], bb.layout.enc_pos);
    }
    if let Some(gpr) = sink.prompt.as_deref_mut() {
        add_into(gpr, &dx0[..plen * d]);
    }
    (loss, t)
}

fn scatter_embeddings(bb: &Backbone, gp: &mut [f64], ids: &[u32], dx: &[f64], pos: Tensor) {
    let d = bb.config.d_model;
    for (i, &tok) in ids.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let e = tok as usize * d;
        add_into(&mut bb.layout.tok_emb.of_mut(gp)[e..e + d], row);
        add_into(&mut pos.of_mut(gp)[i * d..(i + 1) * d], row);
    }
}

fn target_tokens(bb: &Backbone, batch: &[TaskExample]) -> usize {
    let cap = bb.config.max_len.saturating_sub(1);
    batch.iter().map(|ex| ex.targets.len().min(cap) + 1).sum()
}

/// Mean token cross-entropy of one example.
pub fn forward_loss(bb: &Backbone, prompt: Option<&Prompt>, ex: &TaskExample) -> Result<f64> {
    batch_loss(bb, prompt, std::slice::from_ref(ex))
}

/// Mean token cross-entropy over all target tokens of the batch.
pub fn batch_loss(bb: &Backbone, prompt: Option<&Prompt>, batch: &[TaskExample]) -> Result<f64> {
    check_prompt(bb, prompt)?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for ex in batch {
        check_ids(bb, ex)?;
        let (l, t) = example_pass(bb, prompt, ex, 0.0, None);
        sum += l;
        count += t;
    }
    Ok(sum / count as f64)
}

/// Loss and gradient with respect to the prompt only.
pub fn prompt_loss_grad(bb: &Backbone, prompt: &Prompt, batch: &[TaskExample]) -> Result<(f64, Vec<f64>)> {
    if !bb.frozen {
        return Err(Error::Contract("prompt gradients need a frozen backbone".into()));
    }
    check_prompt(bb, Some(prompt))?;
    let total = target_tokens(bb, batch);
    if total == 0 {
        return Err(Error::Input("batch has no target tokens".into()));
    }
    let scale = 1.0 / total as f64;
    let mut g = vec![0.0; prompt.data.len()];
    let mut sum = 0.0;
    for ex in batch {
        check_ids(bb, ex)?;
        let mut sink = GradSink {
            params: None,
            prompt: Some(&mut g),
        };
        sum += example_pass(bb, Some(prompt), ex, scale, Some(&mut sink)).0;
    }
    Ok((sum * scale, g))
}

pub fn prompt_grad(bb: &Backbone, prompt: &Prompt, batch: &[TaskExample]) -> Result<Vec<f64>> {
    Ok(prompt_loss_grad(bb, prompt, batch)?.1)
}

/// Per-example prompts (factorized training). Returns the loss and one
/// gradient per example, each shaped like that example's prompt.
pub fn prompts_loss_grad(bb: &Backbone, items: &[(&Prompt, &TaskExample)]) -> Result<(f64, Vec<Vec<f64>>)> {
    if !bb.frozen {
        return Err(Error::Contract("prompt gradients need a frozen backbone".into()));
    }
    let cap = bb.config.max_len.saturating_sub(1);
    let total: usize = items.iter().map(|(_, ex)| ex.targets.len().min(cap) + 1).sum();
    if total == 0 {
        return Err(Error::Input("batch has no target tokens".into()));
    }
    let scale = 1.0 / total as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(items.len());
    for (pr, ex) in items {
        check_prompt(bb, Some(pr))?;
        check_ids(bb, ex)?;
        let mut g = vec![0.0; pr.data.len()];
        let mut sink = GradSink {
            params: None,
            prompt: Some(&mut g),
        };
        sum += example_pass(bb, Some(pr), ex, scale, Some(&mut sink)).0;
        grads.push(g);
    }
    Ok((sum * scale, grads))
}

/// Loss and gradient with respect to every backbone parameter.
pub fn full_loss_grad(bb: &Backbone, batch: &[TaskExample]) -> Result<(f64, Vec<f64>)> {
    if bb.frozen {
        return Err(Error::Contract("cannot take parameter gradients of a frozen backbone".into()));
    }
    let total = target_tokens(bb, batch);
    if total == 0 {
        return Err(Error::Input("batch has no target tokens".into()));
    }
    let scale = 1.0 / total as f64;
    let mut g = vec![0.0; bb.params.len()];
    let mut sum = 0.0;
    for ex in batch {
        check_ids(bb, ex)?;
        let mut sink = GradSink {
            params: Some(&mut g),
            prompt: None,
        };
        sum += example_pass(bb, None, ex, scale, Some(&mut sink)).0;
    }
    Ok((sum * scale, g))
}

/// Encoder output plus per-layer cross-attention keys and values.
pub struct Memory {
    n: usize,
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
}

/// Self-attention keys and values of the decoded prefix.
#[derive(Clone)]
pub struct DecoderState {
    pub len: usize,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

pub fn encode_memory(bb: &Backbone, prompt: Option<&Prompt>, input: &[u32]) -> Result<Memory> {
    check_prompt(bb, prompt)?;
    let v = bb.config.vocab_size as u32;
    if let Some(&bad) = input.iter().find(|&&t| t >= v) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {v}")));
    }
    let input = &input[..input.len().min(bb.config.max_len)];
    let n = prompt.map_or(0, |pr| pr.len) + input.len();
    let x0 = embed_encoder(bb, prompt.map(|pr| &pr.data[..]), input);
    let (mem, _, _) = encode_fwd(bb, x0, n);
    let d = bb.config.d_model;
    let p = &bb.params;
    let cross_k = bb.layout.dec.iter().map(|l| matmul(&mem, n, d, l.cross.wk.of(p), d)).collect();
    let cross_v = bb.layout.dec.iter().map(|l| matmul(&mem, n, d, l.cross.wv.of(p), d)).collect();
    Ok(Memory { n, cross_k, cross_v })
}

impl DecoderState {
    pub fn new(bb: &Backbone) -> Self {
        let layers = bb.layout.dec.len();
        Self {
            len: 0,
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
        }
    }
}

/// Feeds one token at position `state.len` and returns next-token log-probs.
pub fn decoder_step(bb: &Backbone, mem: &Memory, state: &mut DecoderState, token: u32) -> Vec<f64> {
    let (p, sh, f, v) = (&bb.params[..], shape(bb), bb.config.ffn_dim, bb.config.vocab_size);
    let d = sh.d;
    let pos = state.len;
    let mut y: Vec<f64> = bb
        .embedding(token)
        .iter()
        .zip(&bb.layout.dec_pos.of(p)[pos * d..(pos + 1) * d])
        .map(|(a, b)| a + b)
        .collect();
    for (li, l) in bb.layout.dec.iter().enumerate() {
        let (h, _) = ln_fwd(p, &l.ln1, &y, 1, d);
        let q = matmul(&h, 1, d, l.self_attn.wq.of(p), d);
        state.k[li].extend(matmul(&h, 1, d, l.self_attn.wk.of(p), d));
        state.v[li].extend(matmul(&h, 1, d, l.self_attn.wv.of(p), d));
        let (_, ctx) = attend(&q, &state.k[li], &state.v[li], 1, pos + 1, &sh, None);
        add_into(&mut y, &matmul(&ctx, 1, d, l.self_attn.wo.of(p), d));

        let (h2, _) = ln_fwd(p, &l.ln2, &y, 1, d);
        let q = matmul(&h2, 1, d, l.cross.wq.of(p), d);
        let (_, ctx) = attend(&q, &mem.cross_k[li], &mem.cross_v[li], 1, mem.n, &sh, None);
        add_into(&mut y, &matmul(&ctx, 1, d, l.cross.wo.of(p), d));

        let (h3, _) = ln_fwd(p, &l.ln3, &y, 1, d);
        let (o, _) = ffn_fwd(p, &l.ffn, &h3, 1, d, f);
        add_into(&mut y, &o);
    }
    state.len += 1;
    let (z, _) = ln_fwd(p, &bb.layout.dec_ln, &y, 1, d);
    let mut logits = matmul(&z, 1, d, bb.layout.w_out.of(p), v);
    add_into(&mut logits, bb.layout.b_out.of(p));
    log_softmax(&mut logits);
    logits
}

/// Teacher-forced log-probs for every decoder position (testing aid).
pub fn teacher_forced_logprobs(bb: &Backbone, prompt: Option<&Prompt>, ex: &TaskExample) -> Vec<Vec<f64>> {
    let ex = clip_to_config(bb, ex);
    let (d, v) = (bb.config.d_model, bb.config.vocab_size);
    let n = prompt.map_or(0, |pr| pr.len) + ex.inputs.len();
    let x0 = embed_encoder(bb, prompt.map(|pr| &pr.data[..]), &ex.inputs);
    let (mem, _, _) = encode_fwd(bb, x0, n);
    let mut dec_in = vec![PAD_ID];
    dec_in.extend_from_slice(&ex.targets);
    let t = dec_in.len();
    let (z, _, _) = decode_fwd(bb, embed_decoder(bb, &dec_in), t, &mem, n);
    let mut logits = matmul(&z, t, d, bb.layout.w_out.of(&bb.params), v);
    (0..t)
        .map(|i| {
            let row = &mut logits[i * v..(i + 1) * v];
            add_into(row, bb.layout.b_out.of(&bb.params));
            log_softmax(row);
            row.to_vec()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_backbone, BackboneConfig};
    use rand::{Rng as _, SeedableRng};

    fn cfg(d: usize, v: usize) -> BackboneConfig {
        BackboneConfig {
            d_model: d,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 6,
            vocab_size: v,
            max_len: 12,
        }
    }

    fn ex(inputs: &[u32], targets: &[u32]) -> TaskExample {
        TaskExample {
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            task: "t".into(),
            language: "x".into(),
        }
    }

    #[test]
    fn zero_output_projection_gives_uniform_loss() {
        let mut bb = init_backbone(cfg(4, 4), 1).unwrap();
        let (w, b) = (bb.layout.w_out, bb.layout.b_out);
        w.of_mut(&mut bb.params).fill(0.0);
        b.of_mut(&mut bb.params).fill(0.0);
        let l = forward_loss(&bb, None, &ex(&[3, 2], &[1, 3, 0])).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_prompt_equals_no_prompt() {
        let bb = init_backbone(cfg(4, 7), 2).unwrap();
        let e = ex(&[3, 4, 5], &[6, 3]);
        let a = forward_loss(&bb, None, &e).unwrap();
        let b = forward_loss(&bb, Some(&Prompt::zeros(0, 4)), &e).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn incremental_decoder_matches_teacher_forcing() {
        let bb = init_backbone(cfg(8, 9), 3).unwrap();
        let pr = Prompt::random(2, 8, 0.5, 1);
        let e = ex(&[3, 4, 5, 8], &[6, 3, 7]);
        let full = teacher_forced_logprobs(&bb, Some(&pr), &e);
        let mem = encode_memory(&bb, Some(&pr), &e.inputs).unwrap();
        let mut st = DecoderState::new(&bb);
        let mut feed = vec![PAD_ID];
        feed.extend_from_slice(&e.targets);
        for (i, &tok) in feed.iter().enumerate() {
            let step = decoder_step(&bb, &mem, &mut st, tok);
            for (a, b) in step.iter().zip(&full[i]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_encoder_sequence_is_allowed() {
        let bb = init_backbone(cfg(4, 6), 2).unwrap();
        let l = forward_loss(&bb, None, &ex(&[], &[3, 4])).unwrap();
        assert!(l.is_finite());
    }

    fn fd_check_prompt(d: usize, seed: u64) {
        let mut bb = init_backbone(cfg(d, 11), seed).unwrap();
        bb.freeze();
        let pr = Prompt::random(3, d, 0.5, seed + 1);
        let batch = vec![ex(&[3, 4, 5], &[6, 7]), ex(&[8], &[9, 10, 3, 4])];
        let g = prompt_grad(&bb, &pr, &batch).unwrap();
        let h = 1e-5;
        for i in 0..pr.data.len() {
            let mut a = pr.clone();
            a.data[i] += h;
            let mut b = pr.clone();
            b.data[i] -= h;
            let fd = (batch_loss(&bb, Some(&a), &batch).unwrap() - batch_loss(&bb, Some(&b), &batch).unwrap()) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(err < 1e-5 || (fd - g[i]).abs() < 1e-10, "coord {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        fd_check_prompt(4, 5);
        fd_check_prompt(8, 9);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let bb0 = init_backbone(cfg(4, 9), 13).unwrap();
        let batch = vec![ex(&[3, 4, 5], &[6, 7]), ex(&[], &[8, 3])];
        let (_, g) = full_loss_grad(&bb0, &batch).unwrap();
        let mut rng = crate::util::Rng::seed_from_u64(0);
        let h = 1e-5;
        let mut coords: Vec<usize> = bb0.layout.entries.iter().map(|(_, t, _)| t.offset).collect();
        coords.extend((0..60).map(|_| rng.gen_range(0..bb0.params.len())));
        for i in coords {
            let mut a = bb0.clone();
            a.params[i] += h;
            let mut b = bb0.clone();
            b.params[i] -= h;
            let fd = (batch_loss(&a, None, &batch).unwrap() - batch_loss(&b, None, &batch).unwrap()) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(err < 1e-5 || (fd - g[i]).abs() < 1e-10, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let mut bb = init_backbone(cfg(4, 8), 1).unwrap();
        bb.freeze();
        let pr = Prompt::random(2, 4, 0.5, 3);
        let one = vec![ex(&[3, 4], &[5, 6, 7])];
        let two = vec![one[0].clone(), one[0].clone()];
        let a = prompt_grad(&bb, &pr, &one).unwrap();
        let b = prompt_grad(&bb, &pr, &two).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn contracts_are_enforced() {
        let bb = init_backbone(cfg(4, 8), 1).unwrap();
        let pr = Prompt::random(2, 4, 0.5, 3);
        assert!(matches!(prompt_grad(&bb, &pr, &[ex(&[3], &[4])]), Err(Error::Contract(_))));
        let mut fz = bb.clone();
        fz.freeze();
        assert!(matches!(prompt_grad(&fz, &pr, &[]), Err(Error::Input(_))));
        assert!(matches!(full_loss_grad(&fz, &[ex(&[3], &[4])]), Err(Error::Contract(_))));
        assert!(matches!(forward_loss(&bb, None, &ex(&[8], &[3])), Err(Error::Input(_))));
    }
}
