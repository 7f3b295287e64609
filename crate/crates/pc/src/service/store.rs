//! On-disk state of the service.
//!
//! ```text
//! <root>/artifacts/<sha256>.<ext>   content-addressed outputs
//! <root>/subjects/<id>.pcs          profile containers
//! <root>/subjects.json              subject registry
//! <root>/directions.pcd             direction catalog
//! <root>/jobs.jsonl                 job event log
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use pc_core::latent::DirectionCatalog;
use pc_core::training::SubjectProfile;
use serde::{Deserialize, Serialize};

use crate::container::{self, sha256_hex};
use crate::{PcError, PcResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    /// Profile path relative to the store root.
    pub profile: String,
    /// Artifact hash of the reference image.
    pub thumbnail: Option<String>,
    pub created_at: u64,
    pub tuned: bool,
    pub lora_targets: Vec<String>,
    pub config_fingerprint: String,
}

pub struct Store {
    root: PathBuf,
    registry_lock: Mutex<()>,
}

const ARTIFACT_TYPES: [(&str, &str); 3] = [
    ("png", "image/png"),
    ("json", "application/json"),
    ("csv", "text/csv"),
];

pub fn valid_subject_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn write_atomic(path: &Path, bytes: &[u8]) -> PcResult<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let tmp = dir.join(format!(".tmp-{}", uuid::Uuid::new_v4().simple()));
    fs::write(&tmp, bytes).map_err(|e| PcError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        PcError::io(path, e)
    })
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> PcResult<Self> {
        let root = root.into();
        for dir in [root.join("artifacts"), root.join("subjects")] {
            fs::create_dir_all(&dir).map_err(|e| PcError::io(&dir, e))?;
        }
        Ok(Self {
            root,
            registry_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn jobs_log_path(&self) -> PathBuf {
        self.root.join("jobs.jsonl")
    }

    /// Stores `bytes` under their SHA-256 and returns the hash.
    pub fn put_artifact(&self, bytes: &[u8], ext: &str) -> PcResult<String> {
        if !ARTIFACT_TYPES.iter().any(|(e, _)| *e == ext) {
            return Err(PcError::Config(format!("unsupported artifact type '{ext}'")));
        }
        let hash = sha256_hex(bytes);
        let path = self.root.join("artifacts").join(format!("{hash}.{ext}"));
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    /// Artifact bytes and content type.
    pub fn get_artifact(&self, hash: &str) -> PcResult<Option<(Vec<u8>, &'static str)>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Ok(None);
        }
        for (ext, mime) in ARTIFACT_TYPES {
            let path = self.root.join("artifacts").join(format!("{hash}.{ext}"));
            match fs::read(&path) {
                Ok(bytes) => return Ok(Some((bytes, mime))),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(PcError::io(path, e)),
            }
        }
        Ok(None)
    }

    fn registry_path(&self) -> PathBuf {
        self.root.join("subjects.json")
    }

    pub fn subjects(&self) -> PcResult<Vec<SubjectEntry>> {
        let _g = self.registry_lock.lock().unwrap_or_else(|p| p.into_inner());
        self.read_registry()
    }

    fn read_registry(&self) -> PcResult<Vec<SubjectEntry>> {
        let path = self.registry_path();
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| PcError::json(path.display().to_string(), e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(PcError::io(path, e)),
        }
    }

    /// Read-modify-write of the registry under the single-writer lock.
    pub fn update_subjects<R>(&self, f: impl FnOnce(&mut Vec<SubjectEntry>) -> R) -> PcResult<R> {
        let _g = self.registry_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut entries = self.read_registry()?;
        let r = f(&mut entries);
        entries.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let bytes = serde_json::to_vec_pretty(&entries).map_err(|e| PcError::json("subject registry", e))?;
        write_atomic(&self.registry_path(), &bytes)?;
        Ok(r)
    }

    pub fn subject(&self, id: &str) -> PcResult<Option<SubjectEntry>> {
        Ok(self.subjects()?.into_iter().find(|e| e.subject_id == id))
    }

    fn profile_rel(id: &str) -> String {
        format!("subjects/{id}.pcs")
    }

    pub fn save_profile(&self, profile: &SubjectProfile) -> PcResult<String> {
        let rel = Self::profile_rel(profile.subject_id());
        container::write_profile(profile, &self.root.join(&rel))?;
        Ok(rel)
    }

    pub fn load_profile(&self, entry: &SubjectEntry) -> PcResult<SubjectProfile> {
        container::read_profile(&self.root.join(&entry.profile))
    }

    /// Removes the registry entry and the profile. Returns whether it existed.
    pub fn delete_subject(&self, id: &str) -> PcResult<bool> {
        let removed = self.update_subjects(|entries| {
            let before = entries.len();
            entries.retain(|e| e.subject_id != id);
            entries.len() != before
        })?;
        let path = self.root.join(Self::profile_rel(id));
        if path.exists() {
            fs::remove_dir_all(&path).map_err(|e| PcError::io(&path, e))?;
        }
        Ok(removed)
    }

    fn catalog_path(&self) -> PathBuf {
        self.root.join("directions.pcd")
    }

    pub fn load_catalog(&self) -> PcResult<Option<DirectionCatalog>> {
        let path = self.catalog_path();
        if !path.exists() {
            return Ok(None);
        }
        container::read_catalog(&path).map(Some)
    }

    pub fn save_catalog(&self, catalog: &DirectionCatalog) -> PcResult<()> {
        container::write_catalog(catalog, &self.catalog_path())
    }
}
