//! Frame-wise PSNR and SSIM plus the best-of-N evaluation protocol.

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// PSNR of identical frames is reported at this cap instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Per-frame values of one metric plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub per_frame: Vec<f64>,
    pub aggregate: f64,
}

impl MetricSeries {
    fn from_frames(per_frame: Vec<f64>) -> Self {
        let aggregate = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
        Self { per_frame, aggregate }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: MetricSeries,
    pub ssim: MetricSeries,
}

impl MetricReport {
    /// Line-oriented key=value rendering for logs and CLI output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (t, v) in self.psnr.per_frame.iter().enumerate() {
            out.push_str(&format!("psnr_frame[{t}]={v:.6}\n"));
        }
        for (t, v) in self.ssim.per_frame.iter().enumerate() {
            out.push_str(&format!("ssim_frame[{t}]={v:.6}\n"));
        }
        out.push_str(&format!("psnr={:.6}\n", self.psnr.aggregate));
        out.push_str(&format!("ssim={:.6}\n", self.ssim.aggregate));
        out
    }
}

fn check_shapes(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Frame-wise PSNR in decibels on the [0, 1] range: `10 log10(1 / MSE)`,
/// capped at [`PSNR_CAP_DB`]. The aggregate is the mean over frames.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<MetricSeries> {
    check_shapes(a, b)?;
    let (t_len, h, w, c) = a.shape();
    let per_frame = (0..t_len)
        .map(|t| {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let d = a.frames()[[t, y, x, ch]] - b.frames()[[t, y, x, ch]];
                        acc += d * d;
                    }
                }
            }
            let mse = acc / (h * w * c) as f64;
            if mse == 0.0 {
                PSNR_CAP_DB
            } else {
                (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
            }
        })
        .collect();
    Ok(MetricSeries::from_frames(per_frame))
}

fn gaussian_window(k: usize, sigma: f64) -> Array2<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let mut win = Array2::from_shape_fn((k, k), |(i, j)| {
        let (di, dj) = (i as f64 - c, j as f64 - c);
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let s = win.sum();
    win.mapv_inplace(|v| v / s);
    win
}

/// Frame-wise structural similarity with an 11x11 Gaussian window
/// (sigma 1.5) at valid positions, stabilizing constants for the [0, 1]
/// range, averaged over channels; the aggregate is the mean over frames.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> Result<MetricSeries> {
    check_shapes(a, b)?;
    let (t_len, h, w, c) = a.shape();
    let k = 11usize;
    if h < k || w < k {
        return Err(Error::InvalidParam(format!(
            "frame {h}x{w} smaller than the {k}x{k} SSIM window"
        )));
    }
    let window = gaussian_window(k, 1.5);
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let per_frame = (0..t_len)
        .map(|t| {
            let mut total = 0.0;
            let mut count = 0.0;
            for ch in 0..c {
                for wy in 0..=(h - k) {
                    for wx in 0..=(w - k) {
                        let (mut mx, mut my) = (0.0, 0.0);
                        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                        for dy in 0..k {
                            for dx in 0..k {
                                let g = window[[dy, dx]];
                                let xv = a.frames()[[t, wy + dy, wx + dx, ch]];
                                let yv = b.frames()[[t, wy + dy, wx + dx, ch]];
                                mx += g * xv;
                                my += g * yv;
                                sxx += g * xv * xv;
                                syy += g * yv * yv;
                                sxy += g * xv * yv;
                            }
                        }
                        let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                        let val = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2));
                        total += val;
                        count += 1.0;
                    }
                }
            }
            total / count
        })
        .collect();
    Ok(MetricSeries::from_frames(per_frame))
}

/// Per-metric best over a set of prediction trials: the trial with the best
/// aggregate wins independently for PSNR and SSIM.
pub fn evaluate_best_of(trials: &[VideoClip], truth: &VideoClip) -> Result<MetricReport> {
    if trials.is_empty() {
        return Err(Error::InvalidParam("no trials to evaluate".into()));
    }
    let mut best_psnr: Option<MetricSeries> = None;
    let mut best_ssim: Option<MetricSeries> = None;
    for trial in trials {
        let p = psnr(trial, truth)?;
        let s = ssim(trial, truth)?;
        if best_psnr.as_ref().map_or(true, |b| p.aggregate > b.aggregate) {
            best_psnr = Some(p);
        }
        if best_ssim.as_ref().map_or(true, |b| s.aggregate > b.aggregate) {
            best_ssim = Some(s);
        }
    }
    Ok(MetricReport { psnr: best_psnr.unwrap(), ssim: best_ssim.unwrap() })
}
