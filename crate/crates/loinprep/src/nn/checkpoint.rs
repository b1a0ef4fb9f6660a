//! Binary checkpoint format for parameter sets.
//!
//! Layout: magic `LPCK`, u32 version, u32 manifest length, JSON manifest
//! (kind string, free-form metadata, tensor names + shapes), then all
//! tensor data as little-endian f64 in manifest order. Exact f64 bytes,
//! so save → load is bit-identical.

use super::tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: [u8; 4] = *b"LPCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    NotFound(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint manifest: {0}")]
    BadManifest(String),
    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("checkpoint data truncated")]
    Truncated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// An in-memory checkpoint: a typed bundle of named tensors plus string
/// metadata (hyperparameters, seeds, epoch counters).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: &str, t: Tensor) {
        self.tensors.push((name.to_string(), t));
    }

    /// Appends every parameter of `set`, names prefixed with `prefix.`.
    pub fn push_param_set(&mut self, prefix: &str, set: &ParamSet) {
        for (name, tensor) in set.iter() {
            self.tensors.push((format!("{prefix}.{name}"), tensor.clone()));
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Restores every parameter of `set` from entries named `prefix.<name>`,
    /// validating shapes.
    pub fn read_param_set(&self, prefix: &str, set: &mut ParamSet) -> Result<(), CheckpointError> {
        for idx in 0..set.len() {
            let name = format!("{prefix}.{}", set.name(idx));
            let t = self.tensor(&name).ok_or_else(|| {
                CheckpointError::BadManifest(format!("missing tensor {name}"))
            })?;
            if t.shape() != set.value(idx).shape() {
                return Err(CheckpointError::BadManifest(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    set.value(idx).shape()
                )));
            }
            *set.value_mut(idx) = t.clone();
        }
        Ok(())
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    pub fn meta_usize(&self, key: &str) -> Option<usize> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }
}

/// Writes a checkpoint to `path` (parent directories created).
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let manifest = Manifest {
        kind: ck.kind.clone(),
        meta: ck.meta.clone(),
        tensors: ck
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
    f.write_all(&manifest_json)?;
    for (_, t) in &ck.tensors {
        for v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads a checkpoint, optionally enforcing its `kind`.
pub fn load_checkpoint(path: &Path, expect_kind: Option<&str>) -> Result<Checkpoint, CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CheckpointError::NotFound(path.display().to_string())
        } else {
            CheckpointError::Io(e)
        }
    })?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf).map_err(|_| CheckpointError::Truncated)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    f.read_exact(&mut u32buf).map_err(|_| CheckpointError::Truncated)?;
    let mlen = u32::from_le_bytes(u32buf) as usize;
    let mut mbuf = vec![0u8; mlen];
    f.read_exact(&mut mbuf).map_err(|_| CheckpointError::Truncated)?;
    let manifest: Manifest = serde_json::from_slice(&mbuf)
        .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;
    if let Some(expected) = expect_kind {
        if manifest.kind != expected {
            return Err(CheckpointError::KindMismatch {
                expected: expected.to_string(),
                found: manifest.kind,
            });
        }
    }
    let mut ck = Checkpoint {
        kind: manifest.kind,
        meta: manifest.meta,
        tensors: Vec::with_capacity(manifest.tensors.len()),
    };
    let mut f64buf = [0u8; 8];
    for entry in manifest.tensors {
        let mut t = Tensor::zeros(entry.rows, entry.cols);
        for v in t.data.iter_mut() {
            f.read_exact(&mut f64buf).map_err(|_| CheckpointError::Truncated)?;
            *v = f64::from_le_bytes(f64buf);
        }
        ck.tensors.push((entry.name, t));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lpck-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut ck = Checkpoint::new("policy");
        ck.meta.insert("seed".into(), "42".into());
        ck.push_tensor(
            "w",
            Tensor::from_vec(2, 3, vec![1.5, -0.25, 1e-300, f64::MIN_POSITIVE, 3.7, 0.1]),
        );
        ck.push_tensor("b", Tensor::from_vec(1, 3, vec![0.0, -0.0, 2.5]));
        let path = temp_path("roundtrip.lpck");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path, Some("policy")).unwrap();
        assert_eq!(back.meta.get("seed").unwrap(), "42");
        for (name, t) in ck.tensors() {
            let bt = back.tensor(name).unwrap();
            assert_eq!(bt.shape(), t.shape());
            for (a, b) in t.data.iter().zip(&bt.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_checkpoint(Path::new("/nonexistent/x.lpck"), None).unwrap_err();
        assert_eq!(err.to_string(), "checkpoint not found: /nonexistent/x.lpck");
    }

    #[test]
    fn kind_mismatch_detected() {
        let ck = Checkpoint::new("tactile");
        let path = temp_path("kind.lpck");
        save_checkpoint(&path, &ck).unwrap();
        let err = load_checkpoint(&path, Some("policy")).unwrap_err();
        assert!(matches!(err, CheckpointError::KindMismatch { .. }));
    }

    #[test]
    fn param_set_roundtrip() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        set.add("b", Tensor::from_vec(1, 2, vec![-1.0, 7.0]));
        let mut ck = Checkpoint::new("net");
        ck.push_param_set("actor", &set);
        let path = temp_path("pset.lpck");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path, None).unwrap();
        let mut restored = ParamSet::new();
        restored.add("w", Tensor::zeros(2, 2));
        restored.add("b", Tensor::zeros(1, 2));
        back.read_param_set("actor", &mut restored).unwrap();
        assert_eq!(restored.value(0).data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(restored.value(1).data, vec![-1.0, 7.0]);
    }

    #[test]
    fn bad_magic_rejected() {
        let path = temp_path("junk.lpck");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load_checkpoint(&path, None).unwrap_err(),
            CheckpointError::BadMagic
        ));
    }
}
