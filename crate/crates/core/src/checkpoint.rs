//! Model checkpoints: a JSON header (shapes, hyperparameters, flags)
//! followed by raw little-endian f64 parameter data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};
use crate::nn::ParamSet;

const MAGIC: &[u8; 8] = b"CLAPCK1\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub lr_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Which model this is ("actvae", "vdvae", "ntp", "rf").
    pub kind: String,
    /// Model hyperparameters, serialized by the owner.
    pub hyper: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

pub fn save_params<H: Serialize>(
    path: &Path,
    kind: &str,
    hyper: &H,
    ps: &ParamSet,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: 1,
        kind: kind.to_string(),
        hyper: serde_json::to_value(hyper)?,
        tensors: ps
            .iter()
            .map(|(_, e)| TensorMeta {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
                lr_scale: e.lr_scale,
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, e) in ps.iter() {
        for v in e.value.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_header(path: &Path) -> Result<CheckpointHeader> {
    let (header, _) = read_all(path)?;
    Ok(header)
}

/// Load a checkpoint of the expected `kind`, returning its hyperparameters
/// and a parameter set in header order.
pub fn load_params<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, ParamSet)> {
    let (header, data) = read_all(path)?;
    if header.kind != kind {
        return Err(CoreError::Format(format!(
            "checkpoint kind {:?} where {kind:?} was required",
            header.kind
        )));
    }
    let hyper: H = serde_json::from_value(header.hyper.clone())?;
    let mut ps = ParamSet::new();
    let mut cursor = 0usize;
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        if cursor + n > data.len() {
            return Err(CoreError::Format("checkpoint data truncated".into()));
        }
        let t = Tensor::new(meta.shape.clone(), data[cursor..cursor + n].to_vec());
        ps.add_with(&meta.name, t, meta.trainable, meta.lr_scale);
        cursor += n;
    }
    if cursor != data.len() {
        return Err(CoreError::Format("trailing data after last tensor".into()));
    }
    Ok((hyper, ps))
}

/// Copy loaded values into a freshly constructed model's parameter set,
/// checking name and shape agreement entry by entry.
pub fn adopt_values(target: &mut ParamSet, loaded: &ParamSet) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(CoreError::Format(format!(
            "parameter count mismatch: built {} vs loaded {}",
            target.len(),
            loaded.len()
        )));
    }
    let ids: Vec<_> = target.iter().map(|(id, _)| id).collect();
    for id in ids {
        let (name, shape) = {
            let e = target.entry(id);
            (e.name.clone(), e.value.shape().to_vec())
        };
        let l = loaded.entry(crate::nn::ParamId(id.0));
        if l.name != name || l.value.shape() != shape {
            return Err(CoreError::Format(format!(
                "parameter mismatch at {:?}: built {name} {shape:?}, loaded {} {:?}",
                id,
                l.name,
                l.value.shape()
            )));
        }
        let e = target.entry_mut(id);
        e.value = l.value.clone();
        e.trainable = l.trainable;
        e.lr_scale = l.lr_scale;
        e.value.requires_grad = l.trainable;
    }
    Ok(())
}

fn read_all(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| CoreError::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|_| CoreError::Format("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(CoreError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| CoreError::Format("missing header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| CoreError::Format("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(CoreError::Format("data section not a multiple of 8 bytes".into()));
    }
    let data = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

/// Hex SHA-256 of a file, for provenance manifests.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Hyper {
        width: usize,
        beta: f64,
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let mut rng = rngs::seeded(3);
        let mut ps = ParamSet::new();
        ps.uniform("a", vec![3, 4], 3, &mut rng);
        ps.add_with("frozen", Tensor::new(vec![2], vec![0.5, -0.5]), false, 10.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let hyper = Hyper { width: 4, beta: 1.0 };
        save_params(&path, "actvae", &hyper, &ps).unwrap();

        let (h2, ps2): (Hyper, ParamSet) = load_params(&path, "actvae").unwrap();
        assert_eq!(h2, hyper);
        assert_eq!(ps2.len(), ps.len());
        for ((_, a), (_, b)) in ps.iter().zip(ps2.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.lr_scale, b.lr_scale);
        }
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let mut ps = ParamSet::new();
        ps.zeros("z", vec![2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_params(&path, "actvae", &serde_json::json!({}), &ps).unwrap();
        assert!(load_params::<serde_json::Value>(&path, "vdvae").is_err());
    }

    #[test]
    fn save_is_deterministic() {
        let mut rng = rngs::seeded(9);
        let mut ps = ParamSet::new();
        ps.uniform("w", vec![5, 5], 5, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_params(&p1, "x", &serde_json::json!({"k": 1}), &ps).unwrap();
        save_params(&p2, "x", &serde_json::json!({"k": 1}), &ps).unwrap();
        assert_eq!(sha256_file(&p1).unwrap(), sha256_file(&p2).unwrap());
    }
}
