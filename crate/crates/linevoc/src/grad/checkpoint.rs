//! Named-parameter checkpoint container.
//!
//! A checkpoint is a directory with two files:
//!
//! - `manifest.json` — entry list `{name, shape, offset}` (offset in bytes
//!   into the payload) plus a free-form `meta` object for trainer state.
//! - `params.bin` — contiguous little-endian 32-bit float payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";

/// Write `entries` and `meta` to `dir`, creating it if needed.
pub fn save(dir: &Path, entries: &[(String, &Tensor<f32>)], meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        meta,
        entries: Vec::with_capacity(entries.len()),
    };
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in entries {
        manifest.entries.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    let mut f = fs::File::create(dir.join(PAYLOAD_FILE))?;
    f.write_all(&payload)?;
    Ok(())
}

/// Read a checkpoint directory back as `(name -> tensor, meta)`. Entries keep
/// manifest order in the returned vector.
pub fn load(dir: &Path) -> Result<(Vec<(String, Tensor<f32>)>, serde_json::Value)> {
    let json = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("parse manifest: {e}")))?;
    let mut payload = Vec::new();
    fs::File::open(dir.join(PAYLOAD_FILE))
        .map_err(|e| Error::Checkpoint(format!("open payload: {e}")))?
        .read_to_end(&mut payload)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "entry {} [{start}, {end}) exceeds payload of {} bytes",
                e.name,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        out.push((e.name.clone(), Tensor::new(&e.shape, data)));
    }
    Ok((out, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_and_bits() {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        let a = Tensor::<f32>::from_f64_slice(&[2, 3], &[1.0, -2.5, 3.25, 0.1, 9.0, -0.0625]);
        let b = Tensor::<f32>::from_f64_slice(&[4], &[0.5, 0.25, -0.125, 7.0]);
        let meta = serde_json::json!({"step": 17, "note": "test"});
        save(
            &dir,
            &[("model/a".to_string(), &a), ("model/b".to_string(), &b)],
            meta,
        )
        .unwrap();
        let (entries, meta) = load(&dir).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, "model/a");
        assert_eq!(entries[0].1.shape(), &[2, 3]);
        assert_eq!(entries[0].1.data(), a.data());
        assert_eq!(entries[1].1.data(), b.data());
        assert_eq!(meta["step"], 17);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = std::env::temp_dir().join(format!("ckpt_trunc_{}", std::process::id()));
        let a = Tensor::<f32>::from_f64_slice(&[8], &[1.0; 8]);
        save(&dir, &[("x".to_string(), &a)], serde_json::json!({})).unwrap();
        let payload = dir.join(PAYLOAD_FILE);
        let bytes = fs::read(&payload).unwrap();
        fs::write(&payload, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load(&dir).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
