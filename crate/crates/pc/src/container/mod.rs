//! A directory holding `manifest.json` plus one little-endian `f32` blob per
//! tensor.
//!
//! Tensors are stored at `f32` precision. Values already rounded with
//! [`pc_core::round_f32`] read back bit-identically.

mod formats;

pub use formats::{
    branch_names,
    catalog_from_container, catalog_to_container, masks_from_container, masks_to_container,
    profile_from_container, profile_to_container, read_catalog, read_masks, read_profile, read_weights,
    weights_from_container, weights_to_container, write_catalog, write_masks, write_profile, write_weights,
    KIND_CATALOG, KIND_MASKS, KIND_PROFILE, KIND_WEIGHTS,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pc_core::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::{PcError, PcResult};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    /// Hex SHA-256 of the blob bytes.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    #[serde(flatten)]
    pub meta: Map<String, Value>,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory form of a container directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    kind: String,
    meta: Map<String, Value>,
    tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Map::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> PcResult<()> {
        if matches!(key, "version" | "kind" | "tensors") {
            return Err(PcError::Config(format!("manifest key '{key}' is reserved")));
        }
        let v = serde_json::to_value(value).map_err(|e| PcError::json(format!("manifest field '{key}'"), e))?;
        self.meta.insert(key.to_owned(), v);
        Ok(())
    }

    pub fn meta(&self) -> &Map<String, Value> {
        &self.meta
    }

    pub fn meta_value<T: DeserializeOwned>(&self, key: &str) -> PcResult<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| PcError::format(&self.kind, format!("manifest has no '{key}'")))?;
        serde_json::from_value(v.clone()).map_err(|e| PcError::json(format!("manifest field '{key}'"), e))
    }

    pub fn meta_opt<T: DeserializeOwned>(&self, key: &str) -> PcResult<Option<T>> {
        match self.meta.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(_) => self.meta_value(key).map(Some),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn tensor(&self, name: &str) -> PcResult<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| PcError::format(&self.kind, format!("no tensor '{name}'")))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Tensors whose name starts with `prefix`, with the prefix removed.
    pub fn tensors_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_owned(), v.clone())))
            .collect()
    }

    fn manifest_and_blobs(&self) -> (Manifest, Vec<(String, Vec<u8>)>) {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blobs = Vec::with_capacity(self.tensors.len());
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let bytes = f32_bytes(t.data());
            let file = format!("{i:04}-{}.f32", sanitize(name));
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                file: file.clone(),
                sha256: sha256_hex(&bytes),
            });
            blobs.push((file, bytes));
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        (manifest, blobs)
    }

    /// Writes the directory atomically: everything goes to a sibling temp
    /// directory that is then renamed over `path`.
    pub fn write(&self, path: &Path) -> PcResult<()> {
        let (manifest, blobs) = self.manifest_and_blobs();
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| PcError::io(&parent, e))?;
        let file_name = path
            .file_name()
            .ok_or_else(|| PcError::Config(format!("{} is not a file path", path.display())))?;
        let tmp = parent.join(format!(
            ".{}.tmp-{}",
            file_name.to_string_lossy(),
            uuid::Uuid::new_v4().simple()
        ));
        let result = (|| {
            fs::create_dir(&tmp).map_err(|e| PcError::io(&tmp, e))?;
            for (file, bytes) in &blobs {
                let p = tmp.join(file);
                fs::write(&p, bytes).map_err(|e| PcError::io(&p, e))?;
            }
            let json = serde_json::to_vec_pretty(&manifest).map_err(|e| PcError::json("manifest", e))?;
            let p = tmp.join(MANIFEST);
            fs::write(&p, json).map_err(|e| PcError::io(&p, e))?;
            if path.exists() {
                let old = parent.join(format!(
                    ".{}.old-{}",
                    file_name.to_string_lossy(),
                    uuid::Uuid::new_v4().simple()
                ));
                fs::rename(path, &old).map_err(|e| PcError::io(path, e))?;
                fs::rename(&tmp, path).map_err(|e| PcError::io(path, e))?;
                fs::remove_dir_all(&old).map_err(|e| PcError::io(&old, e))?;
            } else {
                fs::rename(&tmp, path).map_err(|e| PcError::io(path, e))?;
            }
            Ok(())
        })();
        if result.is_err() {
            let _ = fs::remove_dir_all(&tmp);
        }
        result
    }

    pub fn read(path: &Path) -> PcResult<Self> {
        let mpath = path.join(MANIFEST);
        let bytes = fs::read(&mpath).map_err(|e| PcError::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| PcError::json(mpath.display().to_string(), e))?;
        if manifest.version != FORMAT_VERSION {
            return Err(PcError::format(
                &mpath,
                format!("unsupported format version {}", manifest.version),
            ));
        }
        let mut tensors = BTreeMap::new();
        for entry in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(PcError::format(
                    &mpath,
                    format!("tensor '{}' has dtype {}, expected f32", entry.name, entry.dtype),
                ));
            }
            if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
                return Err(PcError::format(&mpath, format!("bad blob file name '{}'", entry.file)));
            }
            let bpath = path.join(&entry.file);
            let blob = fs::read(&bpath).map_err(|e| PcError::io(&bpath, e))?;
            let numel: usize = entry.shape.iter().product();
            if blob.len() != numel * 4 {
                return Err(PcError::format(
                    &bpath,
                    format!("{} bytes for shape {:?}", blob.len(), entry.shape),
                ));
            }
            if sha256_hex(&blob) != entry.sha256 {
                return Err(PcError::format(&bpath, "checksum mismatch"));
            }
            let data = blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)?;
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(PcError::format(&mpath, format!("duplicate tensor '{}'", entry.name)));
            }
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    /// Reads `path` and checks its kind.
    pub fn read_kind(path: &Path, kind: &str) -> PcResult<Self> {
        let c = Self::read(path)?;
        if c.kind != kind {
            return Err(PcError::format(path, format!("holds a '{}', expected '{kind}'", c.kind)));
        }
        Ok(c)
    }
}

fn f32_bytes(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    pc_core::backend::hex(&Sha256::digest(bytes))
}
