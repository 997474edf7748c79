//! Persistent user-to-key registry and the attribution query.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{ensure_dims, Error, Result};
use crate::keygen::Key;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub user_id: String,
    /// RFC 3339, UTC.
    pub registered_at: String,
    pub key: Key,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryStore {
    /// Incremented on every successful write.
    pub version: u64,
    pub dataset_hash: String,
    pub entries: Vec<RegistryEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "users", rename_all = "snake_case")]
pub enum Verdict {
    Attributed(String),
    NoMatch,
    Ambiguous(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyScore {
    pub user_id: String,
    pub key_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub verdict: Verdict,
    pub scores: Vec<KeyScore>,
}

impl RegistryStore {
    pub fn new(dataset_hash: impl Into<String>) -> Self {
        Self {
            version: 0,
            dataset_hash: dataset_hash.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn d_x(&self) -> Option<usize> {
        self.entries.first().map(|e| e.key.d_x())
    }

    pub fn user_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.user_id.as_str()).collect()
    }

    fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            e.key.validate()?;
            DateTime::parse_from_rfc3339(&e.registered_at).map_err(|err| {
                Error::Format(format!("entry {}: bad timestamp: {err}", e.user_id))
            })?;
            if let Some(d) = self.d_x() {
                ensure_dims("registry entry", d, e.key.d_x())?;
            }
            for prev in &self.entries[..i] {
                if prev.user_id == e.user_id {
                    return Err(Error::Format(format!("duplicate user id {}", e.user_id)));
                }
                if prev.key.id == e.key.id {
                    return Err(Error::Format(format!("duplicate key id {}", e.key.id)));
                }
            }
        }
        Ok(())
    }

    /// Adds an entry in memory, stamped with the current time.
    pub fn insert(&mut self, user_id: &str, key: Key, model_ref: Option<String>) -> Result<()> {
        self.insert_at(user_id, key, model_ref, Utc::now())
    }

    pub fn insert_at(
        &mut self,
        user_id: &str,
        key: Key,
        model_ref: Option<String>,
        at: DateTime<Utc>,
    ) -> Result<()> {
        if user_id.is_empty() {
            return Err(Error::Contract("empty user id".into()));
        }
        key.validate()?;
        if let Some(d) = self.d_x() {
            ensure_dims("register", d, key.d_x())?;
        }
        if self.entries.iter().any(|e| e.user_id == user_id) {
            return Err(Error::Conflict(format!("user {user_id} is already registered")));
        }
        if self.entries.iter().any(|e| e.key.id == key.id) {
            return Err(Error::Conflict(format!("key {} is already registered", key.id)));
        }
        self.entries.push(RegistryEntry {
            user_id: user_id.to_string(),
            registered_at: at.to_rfc3339_opts(SecondsFormat::Secs, true),
            key,
            model_ref,
        });
        Ok(())
    }

    /// Scores every key on `clip`. Exactly one positive score attributes the
    /// clip; two or more are reported as ambiguous rather than resolved.
    pub fn attribute(&self, clip: &AudioClip) -> Result<AttributionResult> {
        self.attribute_samples(clip.samples())
    }

    pub fn attribute_samples(&self, x: &[f64]) -> Result<AttributionResult> {
        let Some(d) = self.d_x() else {
            return Err(Error::EmptyRegistry);
        };
        ensure_dims("attribute", d, x.len())?;
        let scores: Vec<KeyScore> = self
            .entries
            .iter()
            .map(|e| KeyScore {
                user_id: e.user_id.clone(),
                key_id: e.key.id,
                score: e.key.score_samples(x),
            })
            .collect();
        let mut fired: Vec<String> = scores
            .iter()
            .filter(|s| s.score > 0.0)
            .map(|s| s.user_id.clone())
            .collect();
        let verdict = match fired.len() {
            0 => Verdict::NoMatch,
            1 => Verdict::Attributed(fired.remove(0)),
            _ => Verdict::Ambiguous(fired),
        };
        Ok(AttributionResult { verdict, scores })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let store: Self = serde_json::from_str(s)?;
        store.validate()?;
        Ok(store)
    }

    /// Loads `path`, or returns an empty store when it does not exist yet.
    pub fn open(path: impl AsRef<Path>, dataset_hash: &str) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(Self::new(dataset_hash));
        }
        let store = Self::load(path)?;
        if store.dataset_hash != dataset_hash {
            return Err(Error::StaleKeys {
                expected: store.dataset_hash,
                actual: dataset_hash.to_string(),
            });
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Writes the store with the version bumped, via a temporary file renamed
    /// over `path`. Fails with a version conflict when the file on disk has
    /// moved past the version this store was loaded at.
    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let on_disk = if path.exists() {
            Self::load(path)?.version
        } else {
            0
        };
        if on_disk != self.version {
            return Err(Error::VersionConflict {
                expected: self.version,
                found: on_disk,
            });
        }
        let mut next = self.clone();
        next.version += 1;
        let tmp = temp_path(path);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(next.to_json().map_err(std::io::Error::other)?.as_bytes())?;
            f.write_all(b"\n")?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(path, e));
        }
        self.version = next.version;
        Ok(())
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Registers `user_id` in the store at `path` and persists it. On any error
/// the file is left unchanged.
pub fn register(
    path: impl AsRef<Path>,
    dataset_hash: &str,
    user_id: &str,
    key: Key,
    model_ref: Option<String>,
) -> Result<RegistryStore> {
    let path = path.as_ref();
    let mut store = RegistryStore::open(path, dataset_hash)?;
    store.insert(user_id, key, model_ref)?;
    store.save(path)?;
    Ok(store)
}

/// Attribution against a stored registry.
pub fn attribute(store: &RegistryStore, clip: &AudioClip) -> Result<AttributionResult> {
    store.attribute(clip)
}
