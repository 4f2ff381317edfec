//! Scene, object and motion encoders.
//!
//! All three share the same downsampling trunk shape: one stride-2
//! convolution per halving of the spatial size, channels doubling from
//! `base_channels` up to the feature dim `D`. The scene/object encoders
//! concatenate the per-frame features along channels and compress `T*D -> D`
//! with a linear map, collapsing time. The motion encoder keeps the temporal
//! axis and runs self-attention inside working pools of `T / N_t`
//! consecutive frames; temporal information never crosses a pool boundary.

use crate::error::{Error, Result};
use crate::nn::layers::{silu, Conv2d, Linear, ResStack};
use crate::nn::param::xavier_uniform;
use crate::nn::{Binding, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Spatial downsample factors (powers of two >= 2).
    pub f_s: usize,
    pub f_o: usize,
    pub f_m: usize,
    /// Feature (and codebook) dimension.
    pub d: usize,
    pub residual_depth: usize,
    /// Number of temporal working pools in the motion encoder.
    pub n_t: usize,
    pub base_channels: usize,
    pub in_channels: usize,
}

impl EncoderConfig {
    pub fn validate(&self, t: usize, h: usize, w: usize) -> Result<()> {
        for f in [self.f_s, self.f_o, self.f_m] {
            if f < 2 || !f.is_power_of_two() {
                return Err(Error::InvalidConfig(format!(
                    "downsample factor {f} must be a power of two >= 2"
                )));
            }
            if h % f != 0 || w % f != 0 {
                return Err(Error::InvalidConfig(format!(
                    "spatial size {h}x{w} not divisible by factor {f}"
                )));
            }
        }
        if self.n_t == 0 || t % self.n_t != 0 {
            return Err(Error::InvalidConfig(format!(
                "clip length {t} not divisible by N_t = {}",
                self.n_t
            )));
        }
        if self.d == 0 || self.base_channels == 0 {
            return Err(Error::InvalidConfig("zero channel width".into()));
        }
        Ok(())
    }
}

/// Stride-2 conv stack halving the spatial size `log2(factor)` times, then a
/// 3x3 projection to `d` channels.
#[derive(Clone)]
pub struct Trunk {
    convs: Vec<Conv2d>,
    to_d: Conv2d,
}

impl Trunk {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        base: usize,
        d: usize,
        factor: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stages = factor.trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(stages);
        let mut ch = in_ch;
        for i in 0..stages {
            let out = (base << i).min(d);
            convs.push(Conv2d::new(ps, &format!("{name}.down{i}"), ch, out, 3, 2, 1, rng));
            ch = out;
        }
        let to_d = Conv2d::new(ps, &format!("{name}.to_d"), ch, d, 3, 1, 1, rng);
        Self { convs, to_d }
    }

    /// `(N, C, H, W) -> (N, d, H/f, W/f)`.
    pub fn forward(&self, t: &Tape, bind: &Binding, mut x: Var) -> Var {
        for conv in &self.convs {
            x = silu(t, conv.forward(t, bind, x));
        }
        self.to_d.forward(t, bind, x)
    }
}

/// Scene/object encoder: per-frame trunk, channel-axis concatenation of the
/// `T` frame features, `T*D -> D` linear compression, residual stack.
#[derive(Clone)]
pub struct ContentEncoder {
    trunk: Trunk,
    temporal_proj: Linear,
    res: ResStack,
    pub d: usize,
    pub t_len: usize,
}

impl ContentEncoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        factor: usize,
        t_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let trunk = Trunk::new(
            ps,
            &format!("{name}.trunk"),
            cfg.in_channels,
            cfg.base_channels,
            cfg.d,
            factor,
            rng,
        );
        let temporal_proj = Linear::new(
            ps,
            &format!("{name}.temporal_proj"),
            t_len * cfg.d,
            cfg.d,
            true,
            rng,
        );
        let res = ResStack::new(ps, &format!("{name}.res"), cfg.d, cfg.residual_depth, rng);
        Self { trunk, temporal_proj, res, d: cfg.d, t_len }
    }

    /// `(T, C, H, W) -> (1, d, H/f, W/f)`.
    pub fn forward(&self, t: &Tape, bind: &Binding, video: Var) -> Var {
        let shape = t.shape(video);
        assert_eq!(shape[0], self.t_len, "clip length mismatch");
        let feats = self.trunk.forward(t, bind, video); // (T, d, h, w)
        let fs = t.shape(feats);
        let (tt, d, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        // (T, d, h, w) -> (h*w, T*d): per-site stacked frame channels.
        let site_major = t.permute(feats, &[2, 3, 0, 1]);
        let stacked = t.reshape(site_major, &[h * w, tt * d]);
        let compressed = self.temporal_proj.forward(t, bind, stacked); // (h*w, d)
        let grid = t.permute(t.reshape(compressed, &[h, w, d]), &[2, 0, 1]);
        let grid = t.reshape(grid, &[1, d, h, w]);
        self.res.forward(t, bind, grid)
    }
}

/// Single-head temporal self-attention over one working pool, exactly
/// `softmax(Z Wq (Z Wk)^T / sqrt(D)) Z Wv`.
pub fn temporal_attention(t: &Tape, z: Var, wq: Var, wk: Var, wv: Var) -> Var {
    let shape = t.shape(z);
    assert_eq!(shape.len(), 2, "pool input must be (L, D)");
    let d = shape[1];
    let q = t.matmul(z, wq);
    let k = t.matmul(z, wk);
    let v = t.matmul(z, wv);
    let logits = t.mul_scalar(t.matmul(q, t.permute(k, &[1, 0])), 1.0 / (d as f64).sqrt());
    let attn = t.softmax_lastdim(logits);
    t.matmul(attn, v)
}

/// Motion encoder: per-frame trunk, pool-local temporal self-attention,
/// per-frame residual stack.
#[derive(Clone)]
pub struct MotionEncoder {
    trunk: Trunk,
    wq: String,
    wk: String,
    wv: String,
    res: ResStack,
    pub d: usize,
    pub n_t: usize,
}

impl MotionEncoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let trunk = Trunk::new(
            ps,
            &format!("{name}.trunk"),
            cfg.in_channels,
            cfg.base_channels,
            cfg.d,
            cfg.f_m,
            rng,
        );
        let (wq, wk, wv) = (
            format!("{name}.attn.wq"),
            format!("{name}.attn.wk"),
            format!("{name}.attn.wv"),
        );
        for w in [&wq, &wk, &wv] {
            ps.register(w, xavier_uniform(rng, &[cfg.d, cfg.d], cfg.d, cfg.d));
        }
        let res = ResStack::new(ps, &format!("{name}.res"), cfg.d, cfg.residual_depth, rng);
        Self { trunk, wq, wk, wv, res, d: cfg.d, n_t: cfg.n_t }
    }

    pub fn attention_weights(&self, bind: &Binding) -> (Var, Var, Var) {
        (bind.var(&self.wq), bind.var(&self.wk), bind.var(&self.wv))
    }

    /// `(T, C, H, W) -> (T, d, H/f_m, W/f_m)`, with `n_t` working pools.
    pub fn forward(&self, t: &Tape, bind: &Binding, motion_video: Var, n_t: usize) -> Var {
        let shape = t.shape(motion_video);
        let t_len = shape[0];
        assert_eq!(t_len % n_t, 0, "T must divide into N_t pools");
        let pool_len = t_len / n_t;
        let feats = self.trunk.forward(t, bind, motion_video); // (T, d, h, w)
        let fs = t.shape(feats);
        let (d, h, w) = (fs[1], fs[2], fs[3]);
        // Group as (site, pool) batches of (pool_len, d) sequences. The T axis
        // splits into consecutive pools because frames are time-major.
        let site_major = t.permute(feats, &[2, 3, 0, 1]); // (h, w, T, d)
        let pooled = t.reshape(site_major, &[h * w * n_t, pool_len, d]);
        let flat = t.reshape(pooled, &[h * w * n_t * pool_len, d]);
        let q = t.reshape(t.matmul(flat, bind.var(&self.wq)), &[h * w * n_t, pool_len, d]);
        let k = t.reshape(t.matmul(flat, bind.var(&self.wk)), &[h * w * n_t, pool_len, d]);
        let v = t.reshape(t.matmul(flat, bind.var(&self.wv)), &[h * w * n_t, pool_len, d]);
        let logits = t.mul_scalar(t.bmm(q, t.permute(k, &[0, 2, 1])), 1.0 / (d as f64).sqrt());
        let attn = t.softmax_lastdim(logits);
        let mixed = t.bmm(attn, v); // (h*w*n_t, pool_len, d)
        let back = t.reshape(mixed, &[h * w, t_len, d]);
        let back = t.reshape(back, &[h, w, t_len, d]);
        let frames = t.permute(back, &[2, 3, 0, 1]); // (T, d, h, w)
        self.res.forward(t, bind, frames)
    }
}
