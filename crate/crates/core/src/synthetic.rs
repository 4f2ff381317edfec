//! Synthetic sprite videos with exact ground-truth object masks.
//!
//! Backgrounds are flat gradients, optionally textured, optionally drifting
//! by a per-step translation. Sprites are solid squares or disks moving at
//! constant velocity with elastic reflection off the canvas edges.
//! Everything is a pure function of the spec, so the same spec renders the
//! same clip bit for bit.

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disk,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub kind: ShapeKind,
    /// RGB color; channel 0 is used for grayscale canvases.
    pub color: [f64; 3],
    /// Side length (square) or diameter (disk), in pixels.
    pub size: usize,
    /// Initial top-left position (row, col).
    pub pos: (f64, f64),
    /// Velocity in pixels per frame (row, col).
    pub vel: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackgroundSpec {
    /// Linear gradient between two colors, vertical or horizontal.
    Gradient { from: [f64; 3], to: [f64; 3], horizontal: bool },
    /// Gradient plus static per-pixel noise of the given amplitude.
    Textured { from: [f64; 3], to: [f64; 3], horizontal: bool, amplitude: f64 },
    /// Textured background translating at a constant per-step velocity,
    /// wrapping toroidally.
    Drifting { from: [f64; 3], to: [f64; 3], horizontal: bool, amplitude: f64, vel: (f64, f64) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub t: usize,
    pub background: BackgroundSpec,
    pub sprites: Vec<SpriteSpec>,
    /// Seeds the background texture only; trajectories are fully determined
    /// by the sprite fields.
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 || !(self.c == 1 || self.c == 3) {
            return Err(Error::InvalidParam("bad canvas dimensions".into()));
        }
        if self.sprites.is_empty() || self.sprites.len() > 3 {
            return Err(Error::InvalidParam("1 to 3 sprites required".into()));
        }
        for s in &self.sprites {
            if s.size == 0 || s.size > self.h || s.size > self.w {
                return Err(Error::InvalidParam(format!(
                    "sprite size {} does not fit canvas {}x{}",
                    s.size, self.h, self.w
                )));
            }
        }
        Ok(())
    }
}

/// Reflects `p` into `[0, max]`, flipping `v`'s sign on each bounce.
fn reflect(mut p: f64, mut v: f64, max: f64) -> (f64, f64) {
    if max <= 0.0 {
        return (0.0, v);
    }
    loop {
        if p < 0.0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2.0 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

fn background_value(
    spec: &BackgroundSpec,
    noise: &Array3<f64>,
    t: usize,
    y: usize,
    x: usize,
    ch: usize,
    h: usize,
    w: usize,
) -> f64 {
    let (from, to, horizontal, amplitude, vel) = match spec {
        BackgroundSpec::Gradient { from, to, horizontal } => (from, to, *horizontal, 0.0, (0.0, 0.0)),
        BackgroundSpec::Textured { from, to, horizontal, amplitude } => {
            (from, to, *horizontal, *amplitude, (0.0, 0.0))
        }
        BackgroundSpec::Drifting { from, to, horizontal, amplitude, vel } => {
            (from, to, *horizontal, *amplitude, *vel)
        }
    };
    // Source coordinates drift toroidally.
    let sy = ((y as f64 - vel.0 * t as f64).rem_euclid(h as f64)) as usize % h;
    let sx = ((x as f64 - vel.1 * t as f64).rem_euclid(w as f64)) as usize % w;
    let frac = if horizontal {
        sx as f64 / (w.max(2) - 1) as f64
    } else {
        sy as f64 / (h.max(2) - 1) as f64
    };
    let base = from[ch] + (to[ch] - from[ch]) * frac;
    (base + amplitude * noise[[sy, sx, ch]]).clamp(0.0, 1.0)
}

/// Renders the clip and the exact per-frame foreground masks.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(VideoClip, Array3<bool>)> {
    spec.validate()?;
    let (t_len, h, w, c) = (spec.t, spec.h, spec.w, spec.c);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Array3::from_shape_fn((h, w, 3), |_| noise_rng.gen_range(-1.0..1.0));

    let mut frames = Array4::zeros((t_len, h, w, c));
    let mut masks = Array3::from_elem((t_len, h, w), false);

    // Per-sprite kinematic state.
    let mut states: Vec<((f64, f64), (f64, f64))> =
        spec.sprites.iter().map(|s| (s.pos, s.vel)).collect();

    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    frames[[t, y, x, ch]] =
                        background_value(&spec.background, &noise, t, y, x, ch, h, w);
                }
            }
        }
        for (sprite, state) in spec.sprites.iter().zip(states.iter()) {
            let (py, px) = (state.0 .0.round() as isize, state.0 .1.round() as isize);
            let size = sprite.size as isize;
            for dy in 0..size {
                for dx in 0..size {
                    let (yy, xx) = (py + dy, px + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if sprite.kind == ShapeKind::Disk {
                        let r = (size as f64 - 1.0) / 2.0;
                        let (cy, cx) = (dy as f64 - r, dx as f64 - r);
                        if cy * cy + cx * cx > r * r + 0.25 {
                            continue;
                        }
                    }
                    let (yy, xx) = (yy as usize, xx as usize);
                    masks[[t, yy, xx]] = true;
                    for ch in 0..c {
                        frames[[t, yy, xx, ch]] = sprite.color[ch].clamp(0.0, 1.0);
                    }
                }
            }
        }
        // Advance trajectories with elastic reflection.
        for (sprite, state) in spec.sprites.iter().zip(states.iter_mut()) {
            let max_y = (h - sprite.size) as f64;
            let max_x = (w - sprite.size) as f64;
            let (mut py, mut px) = (state.0 .0 + state.1 .0, state.0 .1 + state.1 .1);
            let (mut vy, mut vx) = state.1;
            let r = reflect(py, vy, max_y);
            py = r.0;
            vy = r.1;
            let r = reflect(px, vx, max_x);
            px = r.0;
            vx = r.1;
            *state = ((py, px), (vy, vx));
        }
    }
    Ok((VideoClip::new(frames)?, masks))
}

/// Samples a random sprite-over-gradient spec suitable for threshold-based
/// decomposition: the background is static, sprite/background contrast per
/// channel stays within the object band, and sprite displacement per frame
/// exceeds the sprite size so every sprite pixel registers motion.
pub fn sample_spec(h: usize, w: usize, c: usize, t: usize, rng: &mut ChaCha8Rng) -> SyntheticSpec {
    let mid: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let half = rng.gen_range(0.05..0.10);
    let horizontal = rng.gen_bool(0.5);
    let from: [f64; 3] = std::array::from_fn(|i| (mid[i] - half).max(0.02));
    let to: [f64; 3] = std::array::from_fn(|i| (mid[i] + half).min(0.98));
    let size = rng.gen_range(6..=8usize);
    // Sprite color: mid +- delta per channel, |delta| in [0.25, 0.35].
    // Per-channel sprite/background contrast stays inside the object band
    // even at the gradient extremes and after clamping: the channel-max
    // symmetric difference is 2(delta +- half), kept within (0.1, 0.9).
    let color: [f64; 3] = std::array::from_fn(|i| {
        let delta =
            rng.gen_range(0.13 + half..0.43 - half) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        (mid[i] + delta).clamp(0.02, 0.98)
    });
    // Both speed components exceed the sprite size, so consecutive supports
    // stay disjoint even when one axis reflects off a wall.
    let mut speed = || {
        let v = (size + 1) as f64 + rng.gen_range(0.0..1.5);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    };
    let (vy, vx) = (speed(), speed());
    let pos = (
        rng.gen_range(0.0..(h - size) as f64).round(),
        rng.gen_range(0.0..(w - size) as f64).round(),
    );
    let kind = if rng.gen_bool(0.5) { ShapeKind::Square } else { ShapeKind::Disk };
    SyntheticSpec {
        h,
        w,
        c,
        t,
        background: BackgroundSpec::Gradient { from, to, horizontal },
        sprites: vec![SpriteSpec { kind, color, size, pos, vel: (vy, vx) }],
        seed: rng.gen(),
    }
}

/// Renders `count` clips from seeded random specs.
pub fn gen_dataset(
    h: usize,
    w: usize,
    c: usize,
    t: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(VideoClip, Array3<bool>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let spec = sample_spec(h, w, c, t, &mut rng);
            gen_synthetic(&spec)
        })
        .collect()
}
