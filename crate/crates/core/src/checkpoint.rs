//! Checkpoint container: a JSON header (format version, model kind, config
//! snapshot, training step, array index) followed by raw f64 payload, with a
//! SHA-256 digest over the payload verified on load.

use crate::codebook::{Codebook, CodebookSet};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tokengen::model::{TokenModelConfig, TokenPredictor};
use crate::vqvae::{VqVae, VqvaeConfig};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"VCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: String,
    step: u64,
    arrays: Vec<ArrayEntry>,
    digest: String,
}

/// In-memory checkpoint contents.
#[derive(Debug)]
pub struct CheckpointData {
    pub kind: String,
    pub config_json: String,
    pub step: u64,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl CheckpointData {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for (_, arr) in &self.arrays {
            for v in arr.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = hex(&Sha256::digest(&payload));
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config_json.clone(),
            step: self.step,
            arrays: self
                .arrays
                .iter()
                .map(|(name, arr)| ArrayEntry { name: name.clone(), shape: arr.shape().to_vec() })
                .collect(),
            digest,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        let payload = &bytes[12 + header_len..];
        let digest = hex(&Sha256::digest(payload));
        if digest != header.digest {
            return Err(Error::Checkpoint(format!(
                "digest mismatch: stored {} vs computed {digest}",
                header.digest
            )));
        }
        let expected: usize = header
            .arrays
            .iter()
            .map(|a| a.shape.iter().product::<usize>())
            .sum();
        if payload.len() != expected * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header declares {}",
                payload.len(),
                expected * 8
            )));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut offset = 0usize;
        for entry in &header.arrays {
            let n: usize = entry.shape.iter().product();
            let values: Vec<f64> = payload[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
                .collect();
            offset += n * 8;
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            arrays.push((entry.name.clone(), arr));
        }
        Ok(Self { kind: header.kind, config_json: header.config, step: header.step, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::clipio::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Copies named arrays into a parameter store, reporting every array whose
/// shape disagrees or which is missing/unknown.
pub fn restore_params(store: &mut ParamStore, arrays: &[(String, ArrayD<f64>)]) -> Result<()> {
    let mut offending = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (name, arr) in arrays {
        seen.insert(name.clone());
        if !store.contains(name) {
            offending.push(format!("{name} (unknown)"));
            continue;
        }
        if store.get(name).shape() != arr.shape() {
            offending.push(format!(
                "{name} (shape {:?} vs {:?})",
                arr.shape(),
                store.get(name).shape()
            ));
        }
    }
    for name in store.names() {
        if !seen.contains(name) {
            offending.push(format!("{name} (missing)"));
        }
    }
    if !offending.is_empty() {
        return Err(Error::Checkpoint(format!(
            "parameter mismatch: {}",
            offending.join(", ")
        )));
    }
    for (name, arr) in arrays {
        *store.get_mut(name) = arr.clone();
    }
    Ok(())
}

fn book_arrays(prefix: &str, book: &Codebook, out: &mut Vec<(String, ArrayD<f64>)>) {
    out.push((format!("{prefix}.entries"), book.entries.clone().into_dyn()));
    out.push((
        format!("{prefix}.ema_cluster_size"),
        book.ema_cluster_size.clone().into_dyn(),
    ));
    out.push((
        format!("{prefix}.ema_embed_sum"),
        book.ema_embed_sum.clone().into_dyn(),
    ));
}

fn book_from_arrays(
    prefix: &str,
    arrays: &[(String, ArrayD<f64>)],
    decay: f64,
    eps: f64,
) -> Result<Codebook> {
    let find = |suffix: &str| -> Result<&ArrayD<f64>> {
        arrays
            .iter()
            .find(|(name, _)| name == &format!("{prefix}.{suffix}"))
            .map(|(_, arr)| arr)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {prefix}.{suffix}")))
    };
    let entries: Array2<f64> = find("entries")?
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let sizes: Array1<f64> = find("ema_cluster_size")?
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let sums: Array2<f64> = find("ema_embed_sum")?
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut book = Codebook::from_entries(entries, decay, eps);
    book.ema_cluster_size = sizes;
    book.ema_embed_sum = sums;
    Ok(book)
}

/// Serializes a stage-one model (parameters, codebooks, config, step).
pub fn save_vqvae(model: &VqVae, step: u64, path: &Path) -> Result<()> {
    let mut arrays: Vec<(String, ArrayD<f64>)> = model
        .params
        .iter()
        .map(|(name, arr)| (format!("param.{name}"), arr.clone()))
        .collect();
    match &model.books {
        CodebookSet::Shared(book) => book_arrays("book.shared", book, &mut arrays),
        CodebookSet::PerComponent { scene, object, motion } => {
            book_arrays("book.scene", scene, &mut arrays);
            book_arrays("book.object", object, &mut arrays);
            book_arrays("book.motion", motion, &mut arrays);
        }
    }
    let data = CheckpointData {
        kind: "vqvae".into(),
        config_json: serde_json::to_string(&model.cfg)?,
        step,
        arrays,
    };
    data.save(path)
}

/// Restores a stage-one model from a checkpoint.
pub fn load_vqvae(path: &Path) -> Result<(VqVae, u64)> {
    let data = CheckpointData::load(path)?;
    if data.kind != "vqvae" {
        return Err(Error::Checkpoint(format!(
            "expected a vqvae checkpoint, found {}",
            data.kind
        )));
    }
    let cfg: VqvaeConfig = serde_json::from_str(&data.config_json)?;
    let mut model = VqVae::new(cfg, 0)?;
    let params: Vec<(String, ArrayD<f64>)> = data
        .arrays
        .iter()
        .filter_map(|(name, arr)| {
            name.strip_prefix("param.")
                .map(|stripped| (stripped.to_string(), arr.clone()))
        })
        .collect();
    restore_params(&mut model.params, &params)?;
    let books = if cfg.shared_codebook {
        CodebookSet::shared(book_from_arrays(
            "book.shared",
            &data.arrays,
            cfg.ema_decay,
            cfg.smoothing_eps,
        )?)
    } else {
        CodebookSet::separate(
            book_from_arrays("book.scene", &data.arrays, cfg.ema_decay, cfg.smoothing_eps)?,
            book_from_arrays("book.object", &data.arrays, cfg.ema_decay, cfg.smoothing_eps)?,
            book_from_arrays("book.motion", &data.arrays, cfg.ema_decay, cfg.smoothing_eps)?,
        )
    };
    model.books = books;
    Ok((model, data.step))
}

/// Serializes a stage-two model.
pub fn save_predictor(model: &TokenPredictor, step: u64, path: &Path) -> Result<()> {
    let arrays: Vec<(String, ArrayD<f64>)> = model
        .params
        .iter()
        .map(|(name, arr)| (format!("param.{name}"), arr.clone()))
        .collect();
    let data = CheckpointData {
        kind: "token-predictor".into(),
        config_json: serde_json::to_string(&model.cfg)?,
        step,
        arrays,
    };
    data.save(path)
}

pub fn load_predictor(path: &Path) -> Result<(TokenPredictor, u64)> {
    let data = CheckpointData::load(path)?;
    if data.kind != "token-predictor" {
        return Err(Error::Checkpoint(format!(
            "expected a token-predictor checkpoint, found {}",
            data.kind
        )));
    }
    let cfg: TokenModelConfig = serde_json::from_str(&data.config_json)?;
    let mut model = TokenPredictor::new(cfg, 0)?;
    let params: Vec<(String, ArrayD<f64>)> = data
        .arrays
        .iter()
        .filter_map(|(name, arr)| {
            name.strip_prefix("param.")
                .map(|stripped| (stripped.to_string(), arr.clone()))
        })
        .collect();
    restore_params(&mut model.params, &params)?;
    Ok((model, data.step))
}
