//! Video clips: dense T×H×W×C grids of pixel values in `[0, 1]`.

use crate::error::{Error, Result};
use ndarray::Array4;

/// A video clip. Frames are stored as a `(T, H, W, C)` array of `f64`
/// values, each in `[0, 1]`. `C` is 1 (grayscale) or 3 (RGB).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Array4<f64>,
    pub frame_rate: Option<f64>,
}

impl VideoClip {
    /// Builds a clip after validating shape and value range.
    pub fn new(frames: Array4<f64>) -> Result<Self> {
        let (t, h, w, c) = frames.dim();
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidClip(format!(
                "empty dimension in clip shape ({t}, {h}, {w}, {c})"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidClip(format!(
                "channel count must be 1 or 3, got {c}"
            )));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidClip(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { frames, frame_rate: None })
    }

    /// Builds a clip without range validation. The caller guarantees values
    /// already lie in `[0, 1]` (e.g. output of a clamped decoder).
    pub fn from_unchecked(frames: Array4<f64>) -> Self {
        Self { frames, frame_rate: None }
    }

    pub fn with_frame_rate(mut self, fps: f64) -> Self {
        self.frame_rate = Some(fps);
        self
    }

    /// Constant clip with every pixel equal to `value`.
    pub fn constant(t: usize, h: usize, w: usize, c: usize, value: f64) -> Result<Self> {
        Self::new(Array4::from_elem((t, h, w, c), value))
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f64> {
        self.frames
    }

    pub fn t(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn channels(&self) -> usize {
        self.frames.dim().3
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.frames.dim()
    }

    /// Clip holding frames `range` of `self` (end exclusive).
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t() {
            return Err(Error::InvalidParam(format!(
                "frame range {start}..{end} invalid for clip of length {}",
                self.t()
            )));
        }
        let frames = self
            .frames
            .slice(ndarray::s![start..end, .., .., ..])
            .to_owned();
        Ok(Self { frames, frame_rate: self.frame_rate })
    }

    /// Concatenates clips along the time axis. Shapes must agree.
    pub fn concat_time(clips: &[&VideoClip]) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::InvalidParam("no clips to concatenate".into()));
        }
        let (_, h, w, c) = clips[0].shape();
        for clip in clips {
            let (_, h2, w2, c2) = clip.shape();
            if (h2, w2, c2) != (h, w, c) {
                return Err(Error::ShapeMismatch(format!(
                    "cannot concatenate ({h2}, {w2}, {c2}) with ({h}, {w}, {c})"
                )));
            }
        }
        let views: Vec<_> = clips.iter().map(|clip| clip.frames.view()).collect();
        let frames = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(Self { frames, frame_rate: clips[0].frame_rate })
    }

    /// Maximum absolute per-pixel difference against another clip.
    pub fn max_abs_diff(&self, other: &VideoClip) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .frames
            .iter()
            .zip(other.frames.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
