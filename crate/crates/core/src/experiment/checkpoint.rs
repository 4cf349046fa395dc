//! Binary checkpoints: a JSON manifest of named tensors followed by their
//! values as little-endian `f64`.
//!
//! Layout: the magic line `SIFLCKPT1\n`, the manifest length as a
//! little-endian `u64`, the manifest, then the payload. Tensor offsets are
//! byte offsets into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::autodiff::{ParamTree, Tensor};

const MAGIC: &[u8] = b"SIFLCKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub round: u64,
    pub config_hash: String,
    pub initial_eval_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn corrupt(path: &Path, detail: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Checkpoint(format!("{}: {detail}", path.display()))
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &ParamTree) -> Result<(), ExperimentError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::with_capacity(8 * tensors.num_elements());
    for (name, t) in tensors.iter() {
        entries.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: payload.len() as u64 });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest { meta: meta.clone(), tensors: entries }).expect("manifest serializes");
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    bytes.extend_from_slice(&payload);
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|source| ExperimentError::Io { path: tmp.clone(), source })?;
    fs::rename(&tmp, path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamTree), ExperimentError> {
    let bytes = fs::read(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| corrupt(path, "not a checkpoint file"))?;
    if rest.len() < 8 {
        return Err(corrupt(path, "truncated header"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(corrupt(path, "truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(path, e))?;
    let payload = &rest[len..];
    let mut tree = ParamTree::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        let raw = payload.get(start..end).ok_or_else(|| corrupt(path, format!("tensor {:?} out of bounds", e.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| corrupt(path, err))?;
        tree.insert(e.name, t);
    }
    Ok((manifest.meta, tree))
}

/// Checks that `loaded` holds every tensor of `expected` with the same shape.
/// The error names the first offending tensor in `expected` order.
pub fn check_shapes(expected: &ParamTree, loaded: &ParamTree) -> Result<(), ExperimentError> {
    for (name, t) in expected.iter() {
        match loaded.get(name) {
            None => return Err(ExperimentError::Checkpoint(format!("tensor {name:?} missing from checkpoint"))),
            Some(l) if l.shape() != t.shape() => {
                return Err(ExperimentError::ShapeMismatch {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: l.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("a", Tensor::matrix(2, 3, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.0]).unwrap());
        t.insert("b", Tensor::vector(vec![std::f64::consts::PI]));
        t.insert("c", Tensor::scalar(-1.0 / 3.0));
        t
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let meta = CheckpointMeta { round: 17, config_hash: "abc".into(), initial_eval_loss: Some(4.5) };
        save_checkpoint(&path, &meta, &tree()).unwrap();
        let (m, t) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta);
        let bits = |t: &ParamTree| t.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t), bits(&tree()));
        assert!(t.same_structure(&tree()));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let mut other = tree();
        other.insert("b", Tensor::vector(vec![1.0, 2.0]));
        let err = check_shapes(&tree(), &other).unwrap_err();
        assert!(err.to_string().contains("\"b\""), "{err}");
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"hello").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ExperimentError::Checkpoint(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(ExperimentError::Io { .. })));
    }
}
