//! Parameter checkpoints: a JSON manifest beside a little-endian `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub config_hash: String,
    pub step: u64,
    /// Free-form run metadata (mode, age normalization, ...).
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

pub fn blob_path(dir: &Path) -> PathBuf {
    dir.join(BLOB_FILE)
}

impl Checkpoint {
    /// Snapshots every parameter of `stores` in order. Names must be unique
    /// across stores.
    pub fn from_stores(
        stores: &[&ParamStore<f32>],
        config_hash: &str,
        step: u64,
        meta: serde_json::Value,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let mut seen = std::collections::HashSet::new();
        for p in stores.iter().flat_map(|s| s.iter()) {
            if !seen.insert(p.name.clone()) {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("parameter `{}` appears twice", p.name),
                ));
            }
            let length = 4 * p.tensor.numel() as u64;
            entries.push(Entry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset,
                length,
            });
            tensors.push(p.tensor.clone());
            offset += length;
        }
        Ok(Checkpoint {
            manifest: Manifest {
                format: FORMAT_VERSION,
                config_hash: config_hash.into(),
                step,
                meta,
                entries,
            },
            tensors,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::with_capacity(self.tensors.iter().map(|t| 4 * t.numel()).sum());
        for t in &self.tensors {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        let m = manifest_path(dir);
        fs::write(&m, text).map_err(|e| Error::io(&m, e))?;
        let b = blob_path(dir);
        fs::write(&b, blob).map_err(|e| Error::io(&b, e))
    }

    /// Reads and checks a manifest/blob pair. Every entry must lie inside the
    /// blob and match its shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let m = manifest_path(dir);
        let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT_VERSION {
            return Err(Error::invalid(
                "checkpoint",
                format!("unsupported format version {}", manifest.format),
            ));
        }
        let b = blob_path(dir);
        let blob = fs::read(&b).map_err(|e| Error::io(&b, e))?;
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let corrupt = |msg: String| Error::CorruptCheckpoint {
                name: e.name.clone(),
                msg,
            };
            let numel: usize = e.shape.iter().product();
            if e.length != 4 * numel as u64 {
                return Err(corrupt(format!("length {} does not match shape {:?}", e.length, e.shape)));
            }
            let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len() as u64);
            let Some(end) = end else {
                return Err(corrupt(format!(
                    "bytes {}..{} lie outside the {}-byte blob",
                    e.offset,
                    e.offset.saturating_add(e.length),
                    blob.len()
                )));
            };
            let data = blob[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(err.to_string()))?);
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.manifest
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    /// The checkpoint's tensors as a fresh store, in manifest order.
    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (e, t) in self.manifest.entries.iter().zip(&self.tensors) {
            store.add(e.name.clone(), t.clone())?;
        }
        Ok(store)
    }

    /// Writes matching entries into `store`. Parameters of `store` that the
    /// checkpoint lacks are an error when `require_all` is set. Returns the
    /// number of parameters restored.
    pub fn restore(&self, store: &mut ParamStore<f32>, require_all: bool) -> Result<usize> {
        let mut restored = 0;
        for p in store.iter_mut() {
            match self.get(&p.name) {
                Some(t) => {
                    if t.shape() != p.tensor.shape() {
                        return Err(Error::ParamShape {
                            name: p.name.clone(),
                            expected: p.tensor.shape().to_vec(),
                            found: t.shape().to_vec(),
                        });
                    }
                    p.tensor.data_mut().copy_from_slice(t.data());
                    restored += 1;
                }
                None if require_all => {
                    return Err(Error::CorruptCheckpoint {
                        name: p.name.clone(),
                        msg: "missing from checkpoint".into(),
                    })
                }
                None => {}
            }
        }
        Ok(restored)
    }

    /// Logs a warning when the checkpoint was written under another config.
    pub fn check_config_hash(&self, expected: &str) -> bool {
        let same = self.manifest.config_hash == expected;
        if !same {
            log::warn!(
                "checkpoint config hash {} differs from the current config {}",
                self.manifest.config_hash,
                expected
            );
        }
        same
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new([2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap())
            .unwrap();
        s.add("a.bias", Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let ck = Checkpoint::from_stores(&[&s], "abc", 7, serde_json::json!({"mode": 4})).unwrap();
        assert_eq!(ck.manifest.entries.len(), s.len());
        ck.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(loaded, ck);
        let dir2 = tempfile::tempdir().unwrap();
        loaded.save(dir2.path()).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(dir2.path().join(f)).unwrap()
            );
        }
        let mut t = store();
        t.get_mut(t.id("a.bias").unwrap()).data_mut().fill(9.0);
        assert_eq!(loaded.restore(&mut t, true).unwrap(), 2);
        assert_eq!(t.get(t.id("a.bias").unwrap()).data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let s = store();
        let ck = Checkpoint::from_stores(&[&s], "", 0, serde_json::Value::Null).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("a.bias", Tensor::zeros(vec![4])).unwrap();
        match ck.restore(&mut other, true).unwrap_err() {
            Error::ParamShape { name, .. } => assert_eq!(name, "a.bias"),
            e => panic!("{e}"),
        }
        let mut missing = ParamStore::<f32>::new();
        missing.add("b", Tensor::zeros(vec![1])).unwrap();
        assert!(ck.restore(&mut missing, true).is_err());
        assert_eq!(ck.restore(&mut missing, false).unwrap(), 0);
    }

    #[test]
    fn truncated_blob_names_entry() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        Checkpoint::from_stores(&[&s], "", 0, serde_json::Value::Null)
            .unwrap()
            .save(dir.path())
            .unwrap();
        let b = blob_path(dir.path());
        let bytes = fs::read(&b).unwrap();
        fs::write(&b, &bytes[..bytes.len() - 4]).unwrap();
        match Checkpoint::load(dir.path()).unwrap_err() {
            Error::CorruptCheckpoint { name, .. } => assert_eq!(name, "a.bias"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = store();
        assert!(Checkpoint::from_stores(&[&s, &s], "", 0, serde_json::Value::Null).is_err());
    }
}
