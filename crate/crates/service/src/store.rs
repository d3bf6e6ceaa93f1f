//! File-per-artifact JSON store with a rebuildable index.
//!
//! Layout under the root:
//!
//! ```text
//! documents/{id}.json  graphs/{id}.json  runs/{id}.json
//! jobs/{id}.json       reports/{id}.json transcripts/{id}.json
//! index.json
//! ```
//!
//! Every artifact is a JSON object carrying its own id, creation time and
//! (optionally) the provider configuration that produced it, so `index.json`
//! can always be reconstructed from a directory scan.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Document,
    Graph,
    Run,
    Job,
    Report,
    Transcript,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 6] = [
        ArtifactKind::Document,
        ArtifactKind::Graph,
        ArtifactKind::Run,
        ArtifactKind::Job,
        ArtifactKind::Report,
        ArtifactKind::Transcript,
    ];

    pub fn dir(self) -> &'static str {
        match self {
            ArtifactKind::Document => "documents",
            ArtifactKind::Graph => "graphs",
            ArtifactKind::Run => "runs",
            ArtifactKind::Job => "jobs",
            ArtifactKind::Report => "reports",
            ArtifactKind::Transcript => "transcripts",
        }
    }

    /// Jobs change state; everything else is immutable once written.
    fn mutable(self) -> bool {
        self == ArtifactKind::Job
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub path: String,
    pub created: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Index {
    #[serde(default)]
    pub entries: BTreeMap<ArtifactKind, BTreeMap<String, IndexEntry>>,
}

impl Index {
    pub fn get(&self, kind: ArtifactKind, id: &str) -> Option<&IndexEntry> {
        self.entries.get(&kind)?.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Short content hash used for every artifact id.
pub fn content_id(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}

pub fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

type ArtifactLocks = HashMap<(ArtifactKind, String), Arc<Mutex<()>>>;

#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    index: Mutex<Index>,
    locks: Mutex<ArtifactLocks>,
}

impl RunStore {
    /// Opens (creating if needed) a store and reconciles the index with the
    /// files actually present.
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for kind in ArtifactKind::ALL {
            fs::create_dir_all(root.join(kind.dir()))?;
        }
        let store = Self { root, index: Mutex::new(Index::default()), locks: Mutex::new(HashMap::new()) };
        store.rebuild_index()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, kind: ArtifactKind, id: &str) -> PathBuf {
        self.root.join(kind.dir()).join(format!("{id}.json"))
    }

    fn lock_for(&self, kind: ArtifactKind, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry((kind, id.to_string())).or_default().clone()
    }

    /// Writes an artifact. Immutable kinds keep the first version written and
    /// return `false` on a repeat; jobs are overwritten.
    pub fn put(&self, kind: ArtifactKind, id: &str, bytes: &[u8], config: Option<Value>) -> io::Result<bool> {
        if !valid_id(id) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("invalid artifact id `{id}`")));
        }
        let lock = self.lock_for(kind, id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.path(kind, id);
        if path.exists() && !kind.mutable() {
            return Ok(false);
        }
        write_atomic(&path, bytes)?;
        let entry = IndexEntry {
            id: id.to_string(),
            path: format!("{}/{id}.json", kind.dir()),
            created: now_secs(),
            config,
        };
        let mut index = self.index.lock().unwrap_or_else(|e| e.into_inner());
        let slot = index.entries.entry(kind).or_default();
        let entry = match slot.get(id) {
            Some(old) => IndexEntry { created: old.created, ..entry },
            None => entry,
        };
        slot.insert(id.to_string(), entry);
        self.save_index(&index)?;
        Ok(true)
    }

    pub fn put_json<T: Serialize>(&self, kind: ArtifactKind, id: &str, value: &T, config: Option<Value>) -> io::Result<bool> {
        let bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
        self.put(kind, id, &bytes, config)
    }

    pub fn get(&self, kind: ArtifactKind, id: &str) -> io::Result<Option<Vec<u8>>> {
        if !valid_id(id) {
            return Ok(None);
        }
        match fs::read(self.path(kind, id)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn get_json<T: for<'de> Deserialize<'de>>(&self, kind: ArtifactKind, id: &str) -> io::Result<Option<T>> {
        match self.get(kind, id)? {
            None => Ok(None),
            Some(b) => serde_json::from_slice(&b).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
        }
    }

    pub fn contains(&self, kind: ArtifactKind, id: &str) -> bool {
        valid_id(id) && self.path(kind, id).exists()
    }

    pub fn list(&self, kind: ArtifactKind) -> Vec<IndexEntry> {
        let index = self.index.lock().unwrap_or_else(|e| e.into_inner());
        index.entries.get(&kind).map(|m| m.values().cloned().collect()).unwrap_or_default()
    }

    pub fn index(&self) -> Index {
        self.index.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Rescans every artifact directory. Entries for missing files are
    /// dropped; files without an entry get one built from their contents
    /// (`created` and `config` fields when present). Existing entries keep
    /// their timestamps.
    pub fn rebuild_index(&self) -> io::Result<Index> {
        let previous: Index = fs::read(self.root.join("index.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        let mut fresh = Index::default();
        for kind in ArtifactKind::ALL {
            let mut ids: Vec<String> = fs::read_dir(self.root.join(kind.dir()))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().into_string().ok()?;
                    let id = name.strip_suffix(".json")?;
                    valid_id(id).then(|| id.to_string())
                })
                .collect();
            ids.sort();
            let slot = fresh.entries.entry(kind).or_default();
            for id in ids {
                let entry = match previous.get(kind, &id) {
                    Some(e) => e.clone(),
                    None => {
                        let body: Value = fs::read(self.path(kind, &id))
                            .ok()
                            .and_then(|b| serde_json::from_slice(&b).ok())
                            .unwrap_or(Value::Null);
                        IndexEntry {
                            path: format!("{}/{id}.json", kind.dir()),
                            created: body.get("created").and_then(Value::as_u64).unwrap_or(0),
                            config: body.get("config").cloned().filter(|c| !c.is_null()),
                            id: id.clone(),
                        }
                    }
                };
                slot.insert(id, entry);
            }
        }
        let mut index = self.index.lock().unwrap_or_else(|e| e.into_inner());
        *index = fresh.clone();
        self.save_index(&index)?;
        Ok(fresh)
    }

    fn save_index(&self, index: &Index) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(index).map_err(io::Error::other)?;
        write_atomic(&self.root.join("index.json"), &bytes)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.{}.{:?}.tmp", std::process::id(), std::thread::current().id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
