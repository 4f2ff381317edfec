//! Token-level modeling on top of the frozen tokenizer: pseudo videos,
//! working-pool partitions, masked-token training and iterative generation
//! for prediction, interpolation, unconditional generation and manipulation.

pub mod generate;
pub mod model;
pub mod train;

pub use generate::{
    generate_motion, generate_motion_with_trace, generate_unconditional, interpolate, manipulate,
    predict, predict_long, GenerateOptions, GenerationState,
};
pub use model::{TokenModelConfig, TokenPredictor};
pub use train::{Stage2TrainConfig, Stage2Trainer};

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::vqvae::{ContentInput, VqVae};
use serde::{Deserialize, Serialize};

/// Pads `previous` (the first `K` frames) to `t_len` frames by duplicating
/// its last frame.
pub fn make_pseudo(previous: &VideoClip, t_len: usize) -> Result<VideoClip> {
    let k = previous.t();
    if k == 0 || k > t_len {
        return Err(Error::InvalidParam(format!(
            "conditioning length {k} must satisfy 1 <= K <= T = {t_len}"
        )));
    }
    if k == t_len {
        return Ok(previous.clone());
    }
    let last = previous.slice_frames(k - 1, k)?;
    let mut parts: Vec<&VideoClip> = vec![previous];
    let repeats: Vec<VideoClip> = (0..t_len - k).map(|_| last.clone()).collect();
    parts.extend(repeats.iter());
    VideoClip::concat_time(&parts)
}

/// A working-pool partition keeping the first `K` frames and the remaining
/// `T - K` frames in disjoint pools: `N_t = c T / K` pools of length `K / c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolPartition {
    pub t: usize,
    pub k: usize,
    pub c: usize,
}

impl PoolPartition {
    pub fn new(t: usize, k: usize, c: usize) -> Result<Self> {
        let p = Self { t, k, c };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { t, k, c } = *self;
        if t == 0 || k == 0 || c == 0 || k > t {
            return Err(Error::InvalidParam(format!(
                "pool partition needs 1 <= c <= K <= T, got (T={t}, K={k}, c={c})"
            )));
        }
        if k % c != 0 {
            return Err(Error::InvalidParam(format!("c={c} must divide K={k}")));
        }
        if (c * t) % k != 0 {
            return Err(Error::InvalidParam(format!(
                "K={k} must divide c*T={}",
                c * t
            )));
        }
        Ok(())
    }

    /// Number of pools.
    pub fn n_t(&self) -> usize {
        self.c * self.t / self.k
    }

    /// Frames per pool.
    pub fn pool_len(&self) -> usize {
        self.k / self.c
    }
}

/// `N_t = c T / K` after validating the divisibility constraints.
pub fn pool_partition(t: usize, k: usize, c: usize) -> Result<usize> {
    Ok(PoolPartition::new(t, k, c)?.n_t())
}

/// Encodes `clip` and its pseudo video under the partition `(K, c)` and
/// checks that the motion tokens of frames `1..=K` agree exactly. Holds for
/// any encoder weights because the causal frame difference and the pool
/// split keep those frames' features functions of frames `1..=K` only.
pub fn check_token_equality(vqvae: &VqVae, clip: &VideoClip, k: usize, c: usize) -> Result<bool> {
    let part = PoolPartition::new(clip.t(), k, c)?;
    let n_t = part.n_t();
    let previous = clip.slice_frames(0, k)?;
    let pseudo = make_pseudo(&previous, clip.t())?;
    let real = vqvae.tokenize_with_pools(clip, ContentInput::Components, n_t)?;
    let fake = vqvae.tokenize_with_pools(&pseudo, ContentInput::Components, n_t)?;
    let (hm, wm) = vqvae.cfg.motion_grid();
    for t in 0..k {
        for y in 0..hm {
            for x in 0..wm {
                if real.motion.indices[[t, y, x]] != fake.motion.indices[[t, y, x]] {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Mask-fraction schedule over progress `r` in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub shape: ScheduleShape,
    /// Generation iterations.
    pub s: usize,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self { shape: ScheduleShape::Cosine, s: 16 }
    }
}

impl MaskSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(Error::InvalidParam("schedule needs at least one iteration".into()));
        }
        Ok(())
    }

    /// Fraction of tokens masked at progress `r`; 1 at r=0, 0 at r=1,
    /// monotone non-increasing.
    pub fn gamma(&self, r: f64) -> f64 {
        match self.shape {
            ScheduleShape::Cosine => (std::f64::consts::PI * r.clamp(0.0, 1.0) / 2.0).cos(),
        }
    }

    /// Number of masked positions out of `len` at progress `r`:
    /// round-half-up of `gamma(r) * len`, clamped to `[0, len]`.
    pub fn mask_count(&self, len: usize, r: f64) -> usize {
        ((self.gamma(r) * len as f64 + 0.5).floor() as usize).min(len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp_clip(t: usize) -> VideoClip {
        let mut frames = Array4::zeros((t, 2, 2, 1));
        for ti in 0..t {
            frames
                .index_axis_mut(ndarray::Axis(0), ti)
                .fill(ti as f64 / t as f64);
        }
        VideoClip::new(frames).unwrap()
    }

    #[test]
    fn pseudo_video_duplicates_last_frame() {
        // K=2, T=4: (a, b) -> (a, b, b, b).
        let clip = ramp_clip(4);
        let previous = clip.slice_frames(0, 2).unwrap();
        let pseudo = make_pseudo(&previous, 4).unwrap();
        assert_eq!(pseudo.t(), 4);
        let b = clip.frames()[[1, 0, 0, 0]];
        assert_eq!(pseudo.frames()[[0, 0, 0, 0]], clip.frames()[[0, 0, 0, 0]]);
        for t in 1..4 {
            assert_eq!(pseudo.frames()[[t, 0, 0, 0]], b);
        }
    }

    #[test]
    fn pseudo_video_identity_and_single_frame() {
        let clip = ramp_clip(3);
        assert_eq!(make_pseudo(&clip, 3).unwrap().frames(), clip.frames());
        let first = clip.slice_frames(0, 1).unwrap();
        let pseudo = make_pseudo(&first, 3).unwrap();
        for t in 0..3 {
            assert_eq!(pseudo.frames()[[t, 0, 0, 0]], clip.frames()[[0, 0, 0, 0]]);
        }
        assert!(make_pseudo(&clip, 2).is_err());
    }

    #[test]
    fn pool_partition_formula_and_errors() {
        assert_eq!(pool_partition(16, 8, 1).unwrap(), 2);
        // c = K: singleton pools.
        assert_eq!(pool_partition(6, 3, 3).unwrap(), 6);
        // T=20, K=10, c=2: 4 pools of length 5; frames 1..10 fill pools 1-2.
        let p = PoolPartition::new(20, 10, 2).unwrap();
        assert_eq!(p.n_t(), 4);
        assert_eq!(p.pool_len(), 5);
        let boundary_pool = 10 / p.pool_len();
        assert_eq!(boundary_pool, 2, "first 10 frames occupy exactly pools 1-2");
        // c does not divide K.
        assert!(pool_partition(16, 8, 3).is_err());
        // K does not divide cT.
        assert!(pool_partition(10, 4, 1).is_err());
        assert!(pool_partition(8, 0, 1).is_err());
    }

    #[test]
    fn schedule_contract() {
        let sched = MaskSchedule::default();
        assert_eq!(sched.gamma(0.0), 1.0);
        assert!(sched.gamma(1.0).abs() < 1e-12);
        // Monotone non-increasing.
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let g = sched.gamma(i as f64 / 20.0);
            assert!(g <= prev + 1e-12);
            prev = g;
        }
        // gamma(1/2) = cos(pi/4) ~= 0.70711.
        assert!((sched.gamma(0.5) - 0.7071067811865476).abs() < 1e-12);
        // Counts: round-half-up, clamped.
        assert_eq!(sched.mask_count(100, 0.0), 100);
        assert_eq!(sched.mask_count(100, 1.0), 0);
        assert_eq!(sched.mask_count(100, 0.5), 71);
    }

    #[test]
    fn token_equality_across_valid_partitions() {
        use crate::vqvae::{VqVae, VqvaeConfig};
        let cfg = VqvaeConfig {
            t: 8,
            h: 16,
            w: 16,
            c: 3,
            f_s: 4,
            f_o: 4,
            f_m: 4,
            d: 8,
            n: 64,
            n_t: 2,
            base_channels: 8,
            residual_depth: 1,
            shared_codebook: true,
            ema_decay: 0.99,
            smoothing_eps: 1e-5,
            dead_entry_patience: 0,
            c_lb: 0.1,
            c_ub: 0.9,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..3u64 {
            let model = VqVae::new(cfg, seed).unwrap();
            let clip = VideoClip::new(Array4::from_shape_fn((8, 16, 16, 3), |_| {
                rng.gen_range(0.0..1.0)
            }))
            .unwrap();
            for k in 1..=8usize {
                for c in 1..=k {
                    if PoolPartition::new(8, k, c).is_err() {
                        continue;
                    }
                    assert!(
                        check_token_equality(&model, &clip, k, c).unwrap(),
                        "token equality failed at K={k}, c={c}, seed={seed}"
                    );
                }
            }
        }
    }

    #[test]
    fn straddling_partition_rejected() {
        use crate::vqvae::{VqVae, VqvaeConfig};
        let cfg = VqvaeConfig {
            t: 8,
            h: 16,
            w: 16,
            c: 3,
            f_s: 4,
            f_o: 4,
            f_m: 4,
            d: 8,
            n: 64,
            n_t: 2,
            base_channels: 8,
            residual_depth: 1,
            shared_codebook: true,
            ema_decay: 0.99,
            smoothing_eps: 1e-5,
            dead_entry_patience: 0,
            c_lb: 0.1,
            c_ub: 0.9,
        };
        let model = VqVae::new(cfg, 0).unwrap();
        let clip = ramp_clip(8);
        let clip = VideoClip::new(
            Array4::from_shape_fn((8, 16, 16, 3), |(t, y, x, _)| {
                ((t + y + x) as f64 * 0.07) % 1.0
            }),
        )
        .unwrap_or(clip);
        // K=3 does not divide c*T for c=1 (8 % 3 != 0): configuration rejected.
        assert!(check_token_equality(&model, &clip, 3, 1).is_err());
    }
}
