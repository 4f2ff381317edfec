//! Reusable layers built on the tape: linear maps, convolutions, group/layer
//! normalization, residual blocks and multi-head self-attention.

use super::param::{he_normal, normal_init, xavier_uniform, Binding, ParamStore};
use super::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Affine map on the last axis of a `(L, in_dim)` input.
#[derive(Clone)]
pub struct Linear {
    w: String,
    b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = format!("{name}.w");
        ps.register(&w, xavier_uniform(rng, &[in_dim, out_dim], in_dim, out_dim));
        let b = bias.then(|| {
            let b = format!("{name}.b");
            ps.register(&b, ArrayD::zeros(IxDyn(&[out_dim])));
            b
        });
        Self { w, b, in_dim, out_dim }
    }

    /// Zero-initialized variant (uniform logits until trained).
    pub fn zeroed(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = format!("{name}.w");
        ps.register(&w, ArrayD::zeros(IxDyn(&[in_dim, out_dim])));
        let b = bias.then(|| {
            let b = format!("{name}.b");
            ps.register(&b, ArrayD::zeros(IxDyn(&[out_dim])));
            b
        });
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        let shape = t.shape(x);
        assert_eq!(shape.len(), 2, "linear expects (L, D) input");
        let y = t.matmul(x, bind.var(&self.w));
        match &self.b {
            Some(b) => {
                let rows = shape[0];
                let bias = t.reshape(bind.var(b), &[1, self.out_dim]);
                let bias = t.broadcast_to(bias, &[rows, self.out_dim]);
                t.add(y, bias)
            }
            None => y,
        }
    }
}

#[derive(Clone)]
pub struct Conv2d {
    w: String,
    b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        ps.register(&w, he_normal(rng, &[out_ch, in_ch, k, k], in_ch * k * k));
        ps.register(&b, ArrayD::zeros(IxDyn(&[out_ch])));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        t.conv2d(x, bind.var(&self.w), bind.var(&self.b), self.stride, self.pad)
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    w: String,
    b: String,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        ps.register(&w, he_normal(rng, &[in_ch, out_ch, k, k], in_ch * k * k));
        ps.register(&b, ArrayD::zeros(IxDyn(&[out_ch])));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        t.conv_transpose2d(x, bind.var(&self.w), bind.var(&self.b), self.stride, self.pad)
    }
}

/// Group normalization over `(N, C, H, W)` inputs with per-channel affine.
#[derive(Clone)]
pub struct GroupNorm {
    gamma: String,
    beta: String,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        ps.register(&gamma, ArrayD::from_elem(IxDyn(&[channels]), 1.0));
        ps.register(&beta, ArrayD::zeros(IxDyn(&[channels])));
        Self { gamma, beta, groups, channels }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        let shape = t.shape(x);
        assert_eq!(shape.len(), 4, "group norm expects (N, C, H, W)");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.channels);
        let grouped = t.reshape(x, &[n, self.groups, (c / self.groups) * h * w]);
        let mu = t.mean_axis_keep(grouped, 2);
        let centered = t.sub(grouped, t.broadcast_to(mu, &t.shape(grouped)));
        let var = t.mean_axis_keep(t.square(centered), 2);
        let inv = t.rsqrt(var, 1e-5);
        let normed = t.mul(centered, t.broadcast_to(inv, &t.shape(centered)));
        let back = t.reshape(normed, &[n, c, h, w]);
        let gamma = t.reshape(bind.var(&self.gamma), &[1, c, 1, 1]);
        let beta = t.reshape(bind.var(&self.beta), &[1, c, 1, 1]);
        let scaled = t.mul(back, t.broadcast_to(gamma, &[n, c, h, w]));
        t.add(scaled, t.broadcast_to(beta, &[n, c, h, w]))
    }
}

/// Layer normalization over the last axis of a `(L, D)` input.
#[derive(Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        ps.register(&gamma, ArrayD::from_elem(IxDyn(&[dim]), 1.0));
        ps.register(&beta, ArrayD::zeros(IxDyn(&[dim])));
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        let shape = t.shape(x);
        assert_eq!(shape.len(), 2, "layer norm expects (L, D)");
        let (l, d) = (shape[0], shape[1]);
        let mu = t.mean_axis_keep(x, 1);
        let centered = t.sub(x, t.broadcast_to(mu, &[l, d]));
        let var = t.mean_axis_keep(t.square(centered), 1);
        let inv = t.rsqrt(var, 1e-5);
        let normed = t.mul(centered, t.broadcast_to(inv, &[l, d]));
        let gamma = t.reshape(bind.var(&self.gamma), &[1, d]);
        let beta = t.reshape(bind.var(&self.beta), &[1, d]);
        let scaled = t.mul(normed, t.broadcast_to(gamma, &[l, d]));
        t.add(scaled, t.broadcast_to(beta, &[l, d]))
    }
}

pub fn silu(t: &Tape, x: Var) -> Var {
    t.mul(x, t.sigmoid(x))
}

/// Pre-activation residual block: `x + conv(act(gn(conv(act(gn(x))))))`.
#[derive(Clone)]
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        // Largest divisor of the channel count not exceeding 8.
        let groups = (1..=channels.min(8)).rev().find(|g| channels % g == 0).unwrap();
        Self {
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), channels, groups),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), channels, groups),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        let h = self.conv1.forward(t, bind, silu(t, self.gn1.forward(t, bind, x)));
        let h = self.conv2.forward(t, bind, silu(t, self.gn2.forward(t, bind, h)));
        t.add(x, h)
    }
}

#[derive(Clone)]
pub struct ResStack {
    blocks: Vec<ResBlock>,
}

impl ResStack {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| ResBlock::new(ps, &format!("{name}.block{i}"), channels, rng))
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, mut x: Var) -> Var {
        for block in &self.blocks {
            x = block.forward(t, bind, x);
        }
        x
    }
}

/// Randomly zeroes elements with probability `p`, rescaling survivors.
pub fn dropout(t: &Tape, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
    if p <= 0.0 {
        return x;
    }
    let shape = t.shape(x);
    let keep = 1.0 - p;
    let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
        if rng.gen_range(0.0..1.0) < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    t.mul(x, t.constant(mask))
}

/// Multi-head self-attention over a `(L, D)` sequence (bidirectional).
#[derive(Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(dim % heads, 0, "heads must divide model dim");
        Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, x: Var) -> Var {
        let l = t.shape(x)[0];
        let (heads, dim) = (self.heads, self.dim);
        let dh = dim / heads;
        let qkv = self.qkv.forward(t, bind, x);
        let to_heads = |v: Var| {
            let v = t.reshape(v, &[l, heads, dh]);
            t.permute(v, &[1, 0, 2]) // (H, L, dh)
        };
        let q = to_heads(t.slice_axis(qkv, 1, 0, dim));
        let k = to_heads(t.slice_axis(qkv, 1, dim, dim));
        let v = to_heads(t.slice_axis(qkv, 1, 2 * dim, dim));
        let kt = t.permute(k, &[0, 2, 1]); // (H, dh, L)
        let logits = t.mul_scalar(t.bmm(q, kt), 1.0 / (dh as f64).sqrt());
        let attn = t.softmax_lastdim(logits);
        let ctx = t.bmm(attn, v); // (H, L, dh)
        let merged = t.reshape(t.permute(ctx, &[1, 0, 2]), &[l, dim]);
        self.out.forward(t, bind, merged)
    }
}

/// Pre-LN transformer block with GELU feed-forward.
#[derive(Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        intermediate: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, intermediate, true, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), intermediate, dim, true, rng),
        }
    }

    pub fn forward(
        &self,
        t: &Tape,
        bind: &Binding,
        x: Var,
        drop: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Var {
        let mut drop = drop;
        let a = self.attn.forward(t, bind, self.ln1.forward(t, bind, x));
        let a = match drop.as_mut() {
            Some((p, rng)) => dropout(t, a, *p, rng),
            None => a,
        };
        let x = t.add(x, a);
        let h = self.fc1.forward(t, bind, self.ln2.forward(t, bind, x));
        let h = self.fc2.forward(t, bind, t.gelu(h));
        let h = match drop.as_mut() {
            Some((p, rng)) => dropout(t, h, *p, rng),
            None => h,
        };
        t.add(x, h)
    }
}

/// Token/position embedding table; rows are gathered by index.
#[derive(Clone)]
pub struct Embedding {
    table: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let table = format!("{name}.table");
        ps.register(&table, normal_init(rng, &[vocab, dim], 0.02));
        Self { table, vocab, dim }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, ids: &[usize]) -> Var {
        t.select_rows(bind.var(&self.table), ids)
    }

    /// Single row as a `(1, dim)` Var.
    pub fn row(&self, t: &Tape, bind: &Binding, id: usize) -> Var {
        t.select_rows(bind.var(&self.table), &[id])
    }
}
