//! Layers over the tape and the AdamW optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Grads, Graph, NodeId, ParamId, ParamStore, Tensor};

/// Fan-in scaled normal init.
pub fn init_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> ParamId {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.add(name, Tensor::randn(rng, fan_in, fan_out, std))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = init_linear(store, rng, &format!("{name}.w"), fan_in, fan_out);
        let b = bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(1, fan_out)));
        Linear { w, b }
    }

    /// Same but with an explicit weight std (small-init output heads).
    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::randn(rng, fan_in, fan_out, std));
        let b = bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(1, fan_out)));
        Linear { w, b }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let mut out = g.matmul(x, w);
        if let Some(b) = self.b {
            let rows = g.val(out).rows;
            let cols = g.val(out).cols;
            let bn = g.param(b);
            let bb = g.broadcast(bn, rows, cols);
            out = g.add(out, bb);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(&format!("{name}.gain"), Tensor::filled(1, dim, 1.0));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(1, dim));
        LayerNorm { gain, bias, eps: 1e-5 }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let rows = g.val(x).rows;
        let cols = g.val(x).cols;
        let n = g.row_norm(x, self.eps);
        let gain = g.param(self.gain);
        let gb = g.broadcast(gain, rows, cols);
        let scaled = g.mul(n, gb);
        let bias = g.param(self.bias);
        let bb = g.broadcast(bias, rows, cols);
        g.add(scaled, bb)
    }
}

/// Single-head scaled dot-product attention; no causal mask anywhere in
/// this crate (the token generator is bidirectional by design).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
}

impl Attention {
    /// `kv_dim` lets the key/value memory live in a different space than the
    /// queries (style fusion attends from text states to a style vector).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        kv_dim: usize,
    ) -> Self {
        Attention {
            wq: init_linear(store, rng, &format!("{name}.wq"), dim, dim),
            wk: init_linear(store, rng, &format!("{name}.wk"), kv_dim, dim),
            wv: init_linear(store, rng, &format!("{name}.wv"), kv_dim, dim),
            wo: init_linear(store, rng, &format!("{name}.wo"), dim, dim),
            dim,
        }
    }

    pub fn apply(&self, g: &mut Graph, queries: NodeId, memory: NodeId) -> NodeId {
        let wq = g.param(self.wq);
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        let q = g.matmul(queries, wq);
        let k = g.matmul(memory, wk);
        let v = g.matmul(memory, wv);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scaled = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax_rows(scaled);
        let ctx = g.matmul(attn, v);
        let wo = g.param(self.wo);
        g.matmul(ctx, wo)
    }
}

/// Pre-norm block: self-attention then a width-3 conv feed-forward,
/// both residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvAttnBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub proj: Linear,
}

impl ConvAttnBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        ff: usize,
    ) -> Self {
        let conv_std = 1.0 / (3.0 * dim as f64).sqrt();
        ConvAttnBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            conv_w: store.add(
                &format!("{name}.conv.w"),
                Tensor::randn(rng, 3 * dim, ff, conv_std),
            ),
            conv_b: store.add(&format!("{name}.conv.b"), Tensor::zeros(1, ff)),
            proj: Linear::new(store, rng, &format!("{name}.proj"), ff, dim, true),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let normed = self.ln1.apply(g, x);
        let attn_out = self.attn.apply(g, normed, normed);
        let x = g.add(x, attn_out);

        let normed = self.ln2.apply(g, x);
        let w = g.param(self.conv_w);
        let mut h = g.conv1d_same3(normed, w);
        let (rows, cols) = (g.val(h).rows, g.val(h).cols);
        let b = g.param(self.conv_b);
        let bb = g.broadcast(b, rows, cols);
        h = g.add(h, bb);
        h = g.gelu(h);
        let ff_out = self.proj.apply(g, h);
        g.add(x, ff_out)
    }
}

/// Deterministic sinusoidal position table.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut out = Tensor::zeros(len, dim);
    for t in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            *out.at_mut(t, 2 * i) = (t as f64 * freq).sin();
            *out.at_mut(t, 2 * i + 1) = (t as f64 * freq).cos();
        }
    }
    out
}

/// AdamW with decoupled weight decay (default 0) and global-norm clipping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows, t.cols)).collect();
        let v = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows, t.cols)).collect();
        AdamW { beta1, beta2, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    /// One update. Gradients are clipped to `clip` global norm first.
    pub fn update(&mut self, store: &mut ParamStore, grads: &mut Grads, lr: f64, clip: f64) {
        if clip > 0.0 {
            let norm = grads.global_norm();
            if std::env::var("STYLECODEC_DEBUG_GRAD_NORM").is_ok() {
                eprintln!("grad norm {norm:.4}");
            }
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, slot) in grads.by_param.iter().enumerate() {
            let g = match slot {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = store.get_mut(ParamId(idx));
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn moments_mut(&mut self) -> (&mut Vec<Tensor>, &mut Vec<Tensor>) {
        (&mut self.m, &mut self.v)
    }
}

/// Warmup to peak at `warmup`, then linear decay to zero at `total`.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}
