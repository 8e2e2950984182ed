//! Directory checkpoints: `manifest.json` plus `params.bin`.
//!
//! `params.bin` is the concatenation of every tensor as little-endian f32,
//! in manifest order. Each manifest entry records name, shape, dtype and
//! byte offset.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "prunekv-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form extras such as the tokenizer alphabet.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn save<T: Scalar>(params: &ModelParams<T>, dir: &Path, metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut out = BufWriter::new(fs::File::create(dir.join(PARAMS_FILE))?);
    let mut offset = 0u64;
    for t in params.tensors() {
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset,
        });
        for &v in t.data {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
        offset += 4 * t.data.len() as u64;
    }
    out.flush()?;
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        config: params.config.clone(),
        tensors: entries,
        metadata,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load<T: Scalar>(dir: &Path) -> Result<(ModelParams<T>, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    let mut params = ModelParams::<T>::init(&manifest.config, 0)?;
    let mut views = params.tensors_mut();
    if views.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, manifest lists {}",
            views.len(),
            manifest.tensors.len()
        )));
    }
    for (view, entry) in views.iter_mut().zip(&manifest.tensors) {
        if view.name != entry.name || view.shape != entry.shape || entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: expected {} {:?} f32, found {} {:?} {}",
                view.name, view.shape, entry.name, entry.shape, entry.dtype
            )));
        }
        let start = entry.offset as usize;
        let end = start + 4 * view.data.len();
        let src = bytes
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{} truncated", entry.name)))?;
        for (dst, chunk) in view.data.iter_mut().zip(src.chunks_exact(4)) {
            *dst = T::lit(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
    }
    drop(views);
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32() {
        let dir = std::env::temp_dir().join(format!("prunekv-ckpt-{}", std::process::id()));
        let cfg = ModelConfig::new(7, 8, 2, 2, 4, 5);
        let mut p = ModelParams::<f32>::init(&cfg, 9).unwrap();
        p.layers[1].beta = -0.75;
        save(&p, &dir, serde_json::json!({"alphabet": "abc"})).unwrap();
        let (q, m) = load::<f32>(&dir).unwrap();
        assert_eq!(p, q);
        assert_eq!(m.metadata["alphabet"], "abc");
        assert_eq!(m.tensors[1].offset, 4 * 7 * 8);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = std::env::temp_dir().join(format!("prunekv-ckpt-trunc-{}", std::process::id()));
        let cfg = ModelConfig::new(7, 8, 1, 2, 4, 5);
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        save(&p, &dir, serde_json::Value::Null).unwrap();
        let bin = dir.join(PARAMS_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load::<f32>(&dir), Err(Error::Checkpoint(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
