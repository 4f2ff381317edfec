//! Clip container file format and lossless PNG sequence import/export.
//!
//! The container is a small header (magic, version, T, H, W, C, bit depth)
//! followed by raw frame data. Bit depth 64 stores the f64 values verbatim
//! (bit-exact round trip); bit depth 8 stores `round(v * 255)` bytes for
//! interoperability with 8-bit sources. All writes go to a temp file that is
//! renamed into place.

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use ndarray::Array4;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VCLP";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    SixtyFour,
}

impl BitDepth {
    fn code(self) -> u32 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::SixtyFour => 64,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            8 => Ok(BitDepth::Eight),
            64 => Ok(BitDepth::SixtyFour),
            other => Err(Error::InvalidParam(format!("unsupported bit depth {other}"))),
        }
    }
}

/// Writes `bytes` to `path` atomically (temp file + rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes a clip at the given bit depth.
pub fn clip_to_bytes(clip: &VideoClip, depth: BitDepth) -> Vec<u8> {
    let (t, h, w, c) = clip.shape();
    let mut out = Vec::with_capacity(24 + clip.frames().len() * 8);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, t as u32, h as u32, w as u32, c as u32, depth.code()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match depth {
        BitDepth::SixtyFour => {
            for v in clip.frames().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        BitDepth::Eight => {
            for v in clip.frames().iter() {
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn clip_from_bytes(bytes: &[u8]) -> Result<VideoClip> {
    if bytes.len() < 28 || &bytes[..4] != MAGIC {
        return Err(Error::InvalidParam("not a clip container".into()));
    }
    let read_u32 = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = read_u32(4);
    if version != VERSION {
        return Err(Error::InvalidParam(format!(
            "unsupported container version {version}"
        )));
    }
    let (t, h, w, c) = (
        read_u32(8) as usize,
        read_u32(12) as usize,
        read_u32(16) as usize,
        read_u32(20) as usize,
    );
    let depth = BitDepth::from_code(read_u32(24))?;
    let n = t * h * w * c;
    let body = &bytes[28..];
    let values: Vec<f64> = match depth {
        BitDepth::SixtyFour => {
            if body.len() != n * 8 {
                return Err(Error::InvalidParam(format!(
                    "truncated container: {} data bytes, expected {}",
                    body.len(),
                    n * 8
                )));
            }
            body.chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
                .collect()
        }
        BitDepth::Eight => {
            if body.len() != n {
                return Err(Error::InvalidParam(format!(
                    "truncated container: {} data bytes, expected {n}",
                    body.len()
                )));
            }
            body.iter().map(|&b| b as f64 / 255.0).collect()
        }
    };
    let frames = Array4::from_shape_vec((t, h, w, c), values)
        .map_err(|e| Error::InvalidParam(e.to_string()))?;
    VideoClip::new(frames)
}

pub fn save_clip(clip: &VideoClip, path: &Path) -> Result<()> {
    atomic_write(path, &clip_to_bytes(clip, BitDepth::SixtyFour))
}

pub fn load_clip(path: &Path) -> Result<VideoClip> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    clip_from_bytes(&bytes)
}

/// Exports every frame as `frame_{t:04}.png` under `dir` (8-bit).
pub fn export_png_sequence(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (t_len, h, w, c) = clip.shape();
    for t in 0..t_len {
        let path = dir.join(format!("frame_{t:04}.png"));
        let mut buf: Vec<u8> = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = clip.frames()[[t, y, x, ch]];
                    buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        let color = if c == 1 {
            image::ColorType::L8
        } else {
            image::ColorType::Rgb8
        };
        image::save_buffer(&path, &buf, w as u32, h as u32, color)?;
    }
    Ok(())
}

/// Imports a directory of `frame_*.png` files (sorted by name) as a clip.
pub fn import_png_sequence(dir: &Path) -> Result<VideoClip> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidParam(format!("no PNG frames in {}", dir.display())));
    }
    let mut frames: Option<Array4<f64>> = None;
    for (t, path) in paths.iter().enumerate() {
        let img = image::open(path)?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let grayscale = matches!(img.color(), image::ColorType::L8 | image::ColorType::La8);
        let c = if grayscale { 1 } else { 3 };
        let arr = frames.get_or_insert_with(|| {
            Array4::zeros((paths.len(), h as usize, w as usize, c))
        });
        if arr.dim().1 != h as usize || arr.dim().2 != w as usize {
            return Err(Error::ShapeMismatch(format!(
                "frame {} has different dimensions",
                path.display()
            )));
        }
        for y in 0..h as usize {
            for x in 0..w as usize {
                let px = rgb.get_pixel(x as u32, y as u32);
                for ch in 0..c {
                    arr[[t, y, x, ch]] = px[ch] as f64 / 255.0;
                }
            }
        }
    }
    VideoClip::new(frames.unwrap())
}
