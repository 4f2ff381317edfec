//! Threshold-based preprocessing that splits a video into motion, scene and
//! object component videos.
//!
//! The motion video is a per-pixel frame difference. Pixels whose strongest
//! channel difference falls inside `[c_lb, c_ub]` belong to the object video,
//! the rest to the scene video; object and scene partition each frame
//! exactly.

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use ndarray::{Array3, Array4};

/// Thresholds for the object/scene split. Frame differences of `[0, 1]`
/// pixels lie in `[-2, 2]`, so absolute differences lie in `[0, 2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecomposeParams {
    pub c_lb: f64,
    pub c_ub: f64,
}

impl Default for DecomposeParams {
    fn default() -> Self {
        Self { c_lb: 0.1, c_ub: 0.9 }
    }
}

impl DecomposeParams {
    pub fn new(c_lb: f64, c_ub: f64) -> Result<Self> {
        if !(0.0..2.0).contains(&c_lb) || !(c_lb < c_ub && c_ub <= 2.0) {
            return Err(Error::InvalidParam(format!(
                "thresholds must satisfy 0 <= c_lb < c_ub <= 2, got ({c_lb}, {c_ub})"
            )));
        }
        Ok(Self { c_lb, c_ub })
    }
}

/// The motion/scene/object decomposition of a clip.
///
/// Per pixel and frame, `object + scene == original` exactly, and the two
/// have disjoint support as recorded by `object_mask`.
#[derive(Clone, Debug)]
pub struct ComponentVideos {
    /// Signed frame differences in `[-2, 2]`, same shape as the input.
    pub motion: Array4<f64>,
    pub scene: Array4<f64>,
    pub object: Array4<f64>,
    /// True where the pixel was assigned to the object video.
    pub object_mask: Array3<bool>,
}

impl ComponentVideos {
    /// The object mask as a single-channel 0/1 clip (for file export).
    pub fn mask_clip(&self) -> VideoClip {
        let (t, h, w) = self.object_mask.dim();
        let mut mask = Array4::<f64>::zeros((t, h, w, 1));
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    if self.object_mask[[ti, y, x]] {
                        mask[[ti, y, x, 0]] = 1.0;
                    }
                }
            }
        }
        VideoClip::from_unchecked(mask)
    }
}

/// Symmetric frame difference: `m_t = 2 x_t - x_prev - x_next`.
///
/// The previous frame tracks the loop (`x_prev = x_{t-1}`), starting from
/// `x_1`; the next frame saturates at `x_T`. So `m_1 = x_1 - x_2`,
/// `m_T = x_T - x_{T-1}`, and interior frames take the discrete second
/// difference.
pub fn frame_difference(clip: &VideoClip) -> Array4<f64> {
    let frames = clip.frames();
    let t_len = clip.t();
    let mut motion = Array4::zeros(frames.raw_dim());
    for t in 0..t_len {
        let prev = if t == 0 { 0 } else { t - 1 };
        let next = if t + 1 == t_len { t_len - 1 } else { t + 1 };
        let ft = frames.index_axis(ndarray::Axis(0), t);
        let fp = frames.index_axis(ndarray::Axis(0), prev);
        let fn_ = frames.index_axis(ndarray::Axis(0), next);
        let mut mt = motion.index_axis_mut(ndarray::Axis(0), t);
        ndarray::Zip::from(&mut mt)
            .and(&ft)
            .and(&fp)
            .and(&fn_)
            .for_each(|m, &x, &p, &n| *m = 2.0 * x - p - n);
    }
    motion
}

/// Causal frame difference: `m_t = x_t - x_{t-1}`, with `m_1 = 0`.
///
/// Unlike [`frame_difference`], frame `t` of this signal depends only on
/// frames up to `t`. The motion encoder consumes this variant so that motion
/// tokens of a shared prefix are identical across videos sharing that prefix
/// (the property behind conditioning on given frames' motion tokens).
pub fn backward_difference(clip: &VideoClip) -> Array4<f64> {
    let frames = clip.frames();
    let t_len = clip.t();
    let mut motion = Array4::zeros(frames.raw_dim());
    for t in 1..t_len {
        let ft = frames.index_axis(ndarray::Axis(0), t);
        let fp = frames.index_axis(ndarray::Axis(0), t - 1);
        let mut mt = motion.index_axis_mut(ndarray::Axis(0), t);
        ndarray::Zip::from(&mut mt)
            .and(&ft)
            .and(&fp)
            .for_each(|m, &x, &p| *m = x - p);
    }
    motion
}

/// Splits `clip` into motion, scene and object videos.
///
/// The mask is computed per pixel from the channel-wise maximum of
/// `|motion|`; comparisons against both thresholds are inclusive. All
/// channels of a pixel land in the same component.
pub fn decompose(clip: &VideoClip, params: &DecomposeParams) -> Result<ComponentVideos> {
    DecomposeParams::new(params.c_lb, params.c_ub)?;
    let motion = frame_difference(clip);
    let (t, h, w, c) = clip.shape();
    let frames = clip.frames();
    let mut object_mask = Array3::from_elem((t, h, w), false);
    let mut object = Array4::zeros(frames.raw_dim());
    let mut scene = Array4::zeros(frames.raw_dim());
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                let mut d_pixel = 0.0f64;
                for ci in 0..c {
                    d_pixel = d_pixel.max(motion[[ti, hi, wi, ci]].abs());
                }
                let masked = d_pixel >= params.c_lb && d_pixel <= params.c_ub;
                object_mask[[ti, hi, wi]] = masked;
                for ci in 0..c {
                    let v = frames[[ti, hi, wi, ci]];
                    if masked {
                        object[[ti, hi, wi, ci]] = v;
                    } else {
                        scene[[ti, hi, wi, ci]] = v;
                    }
                }
            }
        }
    }
    Ok(ComponentVideos { motion, scene, object, object_mask })
}

/// Reassembles the original clip from a decomposition: `scene + object`.
///
/// Fails if shapes differ or the two videos have overlapping nonzero
/// support (which would violate the partition invariant).
pub fn recombine(components: &ComponentVideos) -> Result<VideoClip> {
    if components.scene.dim() != components.object.dim() {
        return Err(Error::ShapeMismatch(format!(
            "scene {:?} vs object {:?}",
            components.scene.dim(),
            components.object.dim()
        )));
    }
    let overlap = components
        .scene
        .iter()
        .zip(components.object.iter())
        .any(|(&s, &o)| s != 0.0 && o != 0.0);
    if overlap {
        return Err(Error::InvalidParam(
            "scene and object have overlapping nonzero support".into(),
        ));
    }
    let sum = &components.scene + &components.object;
    VideoClip::new(sum)
}
