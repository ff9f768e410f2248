//! On-disk parameter checkpoints.
//!
//! Layout of a checkpoint directory:
//!
//! ```text
//! manifest.json        entries: name, shape, file, offset, sha256, trainable
//! <name>.f32           raw little-endian f32, row-major
//! ```
//!
//! The manifest is written last, so a directory without one is treated as
//! incomplete.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub offset: u64,
    pub sha256: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub params: Vec<ManifestEntry>,
    /// Free-form model description (widths, activations, freeze flags).
    pub topology: serde_json::Value,
}

fn file_name(param: &str) -> String {
    let safe: String = param
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.f32")
}

fn encode(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    for &v in m.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn save(store: &ParamStore, dir: &Path, topology: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }
    let mut entries = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let bytes = encode(&p.value);
        let file = file_name(&p.name);
        fs::write(dir.join(&file), &bytes)?;
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: vec![p.value.nrows(), p.value.ncols()],
            file,
            offset: 0,
            sha256: hex::encode(Sha256::digest(&bytes)),
            trainable: p.trainable,
        });
    }
    let manifest = Manifest {
        format: "cleit-checkpoint".into(),
        version: 1,
        params: entries,
        topology,
    };
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn exists(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let raw = fs::read(dir.join(MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    Ok(serde_json::from_slice(&raw)?)
}

/// Loads values (and trainable flags) into an already-built `store`. Every
/// parameter of the store must be present with a matching shape.
pub fn load(store: &mut ParamStore, dir: &Path) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    for entry in &manifest.params {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let p = store.get_mut(id);
        if entry.shape != [p.value.nrows(), p.value.ncols()] {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint shape {:?}, model shape {:?}",
                entry.name,
                entry.shape,
                p.value.dim()
            )));
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        let n = p.value.len();
        let start = entry.offset as usize;
        let slice = bytes
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated blob", entry.name)))?;
        if hex::encode(Sha256::digest(slice)) != entry.sha256 {
            return Err(Error::Checkpoint(format!("{}: checksum mismatch", entry.name)));
        }
        for (dst, chunk) in p.value.iter_mut().zip(slice.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
        p.trainable = entry.trainable;
    }
    if manifest.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn round_trip_is_bit_exact_for_f32_values() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        store.add("a.w", rng.normal_matrix(3, 4));
        let b = store.add("a.b", rng.normal_matrix(1, 4));
        store.set_trainable(&[b], false);
        store.quantize_f32();

        let dir = tempfile::tempdir().unwrap();
        save(&store, dir.path(), serde_json::json!({"k": 1})).unwrap();
        let mut fresh = store.clone();
        fresh.set_all_trainable(true);
        for id in fresh.ids().collect::<Vec<_>>() {
            fresh.get_mut(id).value.fill(0.0);
        }
        let m = load(&mut fresh, dir.path()).unwrap();
        assert_eq!(m.topology["k"], 1);
        let ids: Vec<_> = store.ids().collect();
        assert!(fresh.values_equal(&store, &ids));
        assert!(!fresh.get(b).trainable);
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::ones((2, 2)));
        let dir = tempfile::tempdir().unwrap();
        let m = save(&store, dir.path(), serde_json::Value::Null).unwrap();
        let path = dir.path().join(&m.params[0].file);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&mut store, dir.path()), Err(Error::Checkpoint(_))));
    }
}
