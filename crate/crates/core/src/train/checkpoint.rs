//! Checkpoint directory: `manifest.json` (names, kinds, byte offsets,
//! shapes, step) plus `tensors.cstt`, the concatenation of one CSTT record
//! per parameter followed by one per optimizer velocity.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{io, DType, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.cstt";
const FORMAT: &str = "constcl-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: usize,
    pub dtype: DType,
    pub seed: u64,
    pub params: Vec<Entry>,
    /// Velocity records, named after their parameter.
    pub velocities: Vec<Entry>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn checkpoint_save(dir: &Path, store: &ParamStore, state: &OptimizerState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let entry = |name: &str, kind: ParamKind, t: &Tensor, blob: &mut Vec<u8>| {
        let offset = blob.len();
        io::encode(t, blob);
        Entry {
            name: name.to_string(),
            kind,
            offset,
            len: blob.len() - offset,
            shape: t.shape().to_vec(),
        }
    };
    let params: Vec<Entry> = store.iter().map(|(_, p)| entry(&p.name, p.kind, &p.tensor, &mut blob)).collect();
    let mut velocities = Vec::new();
    for ((_, p), v) in store.iter().zip(&state.velocities) {
        if let Some(v) = v {
            let t = Tensor::from_vec(v.clone(), p.tensor.shape(), store.dtype())?;
            velocities.push(entry(&p.name, p.kind, &t, &mut blob));
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        step: state.step,
        dtype: store.dtype(),
        seed: store.seed(),
        params,
        velocities,
    };
    let blob_path = dir.join(BLOB);
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&man_path, text + "\n").map_err(|e| Error::io(&man_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(format_err(&path, format!("unsupported checkpoint {} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Loads parameter values into `store`, whose layout (names, kinds, shapes,
/// order) must match the checkpoint exactly, and returns the optimizer state.
pub fn checkpoint_load(dir: &Path, store: &mut ParamStore) -> Result<OptimizerState> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let record = |e: &Entry| -> Result<Tensor> {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= blob.len());
        let end = end.ok_or_else(|| format_err(&blob_path, format!("record {} runs past the end of the file", e.name)))?;
        let (t, used) = io::decode(&blob[e.offset..end]).map_err(|m| format_err(&blob_path, format!("{}: {m}", e.name)))?;
        if used != e.len || t.shape() != e.shape.as_slice() {
            return Err(format_err(&blob_path, format!("record {} does not match the manifest", e.name)));
        }
        Ok(t)
    };
    if store.dtype() != manifest.dtype {
        return Err(format_err(
            &dir.join(MANIFEST),
            format!("checkpoint dtype {:?} differs from model dtype {:?}", manifest.dtype, store.dtype()),
        ));
    }
    let layout: Vec<(String, ParamKind, Vec<usize>)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.kind, p.tensor.shape().to_vec()))
        .collect();
    let saved: Vec<(String, ParamKind, Vec<usize>)> = manifest
        .params
        .iter()
        .map(|e| (e.name.clone(), e.kind, e.shape.clone()))
        .collect();
    if layout != saved {
        return Err(format_err(&dir.join(MANIFEST), "parameter layout does not match the model"));
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (e, &id) in manifest.params.iter().zip(&ids) {
        store.set_values(id, record(e)?.to_vec())?;
    }
    let mut state = OptimizerState::new(store);
    state.step = manifest.step;
    for e in &manifest.velocities {
        let id = store
            .id(&e.name)
            .ok_or_else(|| format_err(&dir.join(MANIFEST), format!("velocity for unknown parameter {}", e.name)))?;
        state.velocities[id.0] = Some(record(e)?.to_vec());
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn store() -> (ParamStore, OptimizerState) {
        let mut s = ParamStore::new(DType::F32, 4);
        let a = s.add("a.weight", ParamKind::Kernel, &[2, 3], Init::FanIn(2)).unwrap();
        s.add("a.bias", ParamKind::Bias, &[3], Init::Zeros).unwrap();
        s.add("n.running_mean", ParamKind::Buffer, &[3], Init::Zeros).unwrap();
        let mut st = OptimizerState::new(&s);
        st.velocities[a.0] = Some(vec![0.5, -0.25, 1.0, 0.0, 2.0, 3.0]);
        st.step = 7;
        (s, st)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (s, st) = store();
        let p1 = dir.path().join("one");
        checkpoint_save(&p1, &s, &st).unwrap();
        let (mut s2, _) = store();
        let id = s2.id("a.weight").unwrap();
        s2.set_values(id, vec![0.0; 6]).unwrap();
        let st2 = checkpoint_load(&p1, &mut s2).unwrap();
        assert_eq!(st2, st);
        assert_eq!(s2.checksum(), s.checksum());
        let p2 = dir.path().join("two");
        checkpoint_save(&p2, &s2, &st2).unwrap();
        for f in [MANIFEST, BLOB] {
            assert_eq!(std::fs::read(p1.join(f)).unwrap(), std::fs::read(p2.join(f)).unwrap());
        }
    }

    #[test]
    fn corrupt_magic_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let (mut s, st) = store();
        checkpoint_save(dir.path(), &s, &st).unwrap();
        let blob = dir.path().join(BLOB);
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[0] = b'X';
        std::fs::write(&blob, bytes).unwrap();
        let err = checkpoint_load(dir.path(), &mut s).unwrap_err().to_string();
        assert!(err.contains("tensors.cstt"), "{err}");
    }

    #[test]
    fn truncated_blob_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let (mut s, st) = store();
        checkpoint_save(dir.path(), &s, &st).unwrap();
        let blob = dir.path().join(BLOB);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(checkpoint_load(dir.path(), &mut s).is_err());
    }

    #[test]
    fn layout_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let (s, st) = store();
        checkpoint_save(dir.path(), &s, &st).unwrap();
        let mut other = ParamStore::new(DType::F32, 4);
        other.add("a.weight", ParamKind::Kernel, &[3, 2], Init::Zeros).unwrap();
        assert!(checkpoint_load(dir.path(), &mut other).is_err());
    }
}
