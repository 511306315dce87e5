//! Durable agent memory: exemplar cases and per-disease illness graphs.
//!
//! Two stores back the closed training loop:
//!
//! * [`ExemplarStore`] — an append-only JSONL log of solved cases with an
//!   in-memory similarity index. Key embeddings are recomputed from each
//!   exemplar's one-liner on open and are never serialized, so the log
//!   stays byte-stable across embedder upgrades.
//! * [`IllnessGraphStore`] — versioned per-disease experience graphs, one
//!   JSON file per version (`<dir>/<disease-slug>/v<N>.json`). Writes go
//!   through a compare-and-swap: a put must carry exactly
//!   `latest_version + 1`, so two concurrent trainers cannot silently
//!   clobber each other — one wins, the other gets a version conflict.
//!
//! File contents are deterministic (sorted maps, no timestamps), which the
//! training loop relies on when it hashes store state to prove rerun
//! stability.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, EmbedError, Embedder, UnitVec};
use crate::graph::{GraphError, IllnessGraph};
use crate::text::normalize_label;
use crate::util::short_hash;

/// Default number of exemplars retrieved for audit augmentation.
pub const DEFAULT_RETRIEVAL_K: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("memory I/O at {path}: {message}")]
    Io { path: String, message: String },
    #[error("corrupt record at {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("version conflict for `{disease}`: store holds v{latest}, put carried v{got} (expected v{expected})")]
    VersionConflict {
        disease: String,
        latest: u64,
        got: u64,
        expected: u64,
    },
    #[error("illness graph for `{disease}` must not carry case-specific shadow evidence")]
    ShadowInIllnessGraph { disease: String },
    #[error("exemplar field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("exemplar for case `{case_id}` is already stored")]
    DuplicateExemplar { case_id: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> MemoryError {
    MemoryError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// One distilled precedent case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub case_id: String,
    /// Compact problem representation; the retrieval key.
    pub one_liner: String,
    /// Full case narrative the precedent was solved from.
    #[serde(default)]
    pub narrative: String,
    /// Confirmed final diagnosis.
    pub diagnosis: String,
    /// What solving this case taught (audit rationale or critic guidance).
    pub lesson: String,
    /// Path to the serialized reasoning trace, when one was written.
    #[serde(default)]
    pub trace_ref: String,
    /// Training rounds it took to get the case right.
    pub rounds: u32,
}

impl Exemplar {
    /// Single-line rendering used when exemplars are fed to the auditor.
    pub fn render(&self) -> String {
        format!(
            "[{}] {} => {} ({})",
            self.case_id, self.one_liner, self.diagnosis, self.lesson
        )
    }

    fn check(&self) -> Result<(), MemoryError> {
        if self.case_id.trim().is_empty() {
            return Err(MemoryError::EmptyField("case_id"));
        }
        if self.one_liner.trim().is_empty() {
            return Err(MemoryError::EmptyField("one_liner"));
        }
        if self.diagnosis.trim().is_empty() {
            return Err(MemoryError::EmptyField("diagnosis"));
        }
        Ok(())
    }
}

/// A retrieval hit: the exemplar plus its similarity to the query.
#[derive(Debug, Clone)]
pub struct RetrievedExemplar<'a> {
    pub exemplar: &'a Exemplar,
    pub similarity: f64,
}

/// Append-only exemplar log with brute-force cosine retrieval.
pub struct ExemplarStore {
    path: PathBuf,
    embedder: Arc<dyn Embedder>,
    records: Vec<Exemplar>,
    keys: Vec<UnitVec>,
}

impl ExemplarStore {
    /// Open (or create) the log at `path`, recomputing every key embedding.
    pub fn open(path: impl Into<PathBuf>, embedder: Arc<dyn Embedder>) -> Result<Self, MemoryError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let mut store = ExemplarStore {
            path: path.clone(),
            embedder,
            records: Vec::new(),
            keys: Vec::new(),
        };
        if path.exists() {
            let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            for (lineno, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: Exemplar =
                    serde_json::from_str(line).map_err(|e| MemoryError::Corrupt {
                        path: format!("{}:{}", path.display(), lineno + 1),
                        reason: e.to_string(),
                    })?;
                let key = store.embedder.embed(&record.one_liner)?;
                store.records.push(record);
                store.keys.push(key);
            }
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Exemplar] {
        &self.records
    }

    /// Append one exemplar to the log and the index. Each case may be
    /// distilled at most once.
    pub fn store_exemplar(&mut self, exemplar: Exemplar) -> Result<(), MemoryError> {
        exemplar.check()?;
        if self.records.iter().any(|r| r.case_id == exemplar.case_id) {
            return Err(MemoryError::DuplicateExemplar {
                case_id: exemplar.case_id,
            });
        }
        let key = self.embedder.embed(&exemplar.one_liner)?;
        let line = serde_json::to_string(&exemplar).map_err(|e| MemoryError::Corrupt {
            path: self.path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| io_err(&self.path, e))?;
        writeln!(file, "{line}").map_err(|e| io_err(&self.path, e))?;
        self.records.push(exemplar);
        self.keys.push(key);
        Ok(())
    }

    /// Top-`k` most similar exemplars to `query`, best first. Ties resolve
    /// to the earliest-stored record so retrieval is deterministic.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievedExemplar<'_>>, MemoryError> {
        if k == 0 || self.records.is_empty() {
            return Ok(Vec::new());
        }
        let probe = self.embedder.embed(query)?;
        let mut scored: Vec<(f64, usize)> = self
            .keys
            .iter()
            .enumerate()
            .map(|(i, key)| Ok((cosine(&probe, key)?, i)))
            .collect::<Result<_, EmbedError>>()?;
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("cosine of unit vectors is finite")
                .then(a.1.cmp(&b.1))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(similarity, i)| RetrievedExemplar {
                exemplar: &self.records[i],
                similarity,
            })
            .collect())
    }
}

/// Stable directory slug for a disease label: readable prefix plus a short
/// hash so distinct labels can never collide after sanitization.
fn disease_slug(label: &str) -> String {
    let norm = normalize_label(label);
    let mut slug: String = norm
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    while slug.contains("--") {
        slug = slug.replace("--", "-");
    }
    let slug = slug.trim_matches('-');
    let hash = short_hash(&norm);
    format!("{}-{}", slug, &hash[..6])
}

/// Versioned per-disease illness-graph store.
pub struct IllnessGraphStore {
    dir: PathBuf,
    /// Serializes the read-check-write window of [`IllnessGraphStore::put`]
    /// within this process.
    write_lock: Mutex<()>,
}

impl IllnessGraphStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, MemoryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(IllnessGraphStore {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    fn disease_dir(&self, disease: &str) -> PathBuf {
        self.dir.join(disease_slug(disease))
    }

    fn version_path(&self, disease: &str, version: u64) -> PathBuf {
        self.disease_dir(disease).join(format!("v{version}.json"))
    }

    /// Highest stored version for `disease` (0 when nothing is stored).
    pub fn latest_version(&self, disease: &str) -> Result<u64, MemoryError> {
        let dir = self.disease_dir(disease);
        if !dir.exists() {
            return Ok(0);
        }
        let mut latest = 0u64;
        for entry in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
            let entry = entry.map_err(|e| io_err(&dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(v) = name
                .strip_prefix('v')
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                latest = latest.max(v);
            }
        }
        Ok(latest)
    }

    /// Load the newest stored graph for `disease`, if any. The loaded graph
    /// is validated; embeddings are left unset for callers to recompute.
    pub fn latest(&self, disease: &str) -> Result<Option<IllnessGraph>, MemoryError> {
        let version = self.latest_version(disease)?;
        if version == 0 {
            return Ok(None);
        }
        self.load(disease, version).map(Some)
    }

    pub fn load(&self, disease: &str, version: u64) -> Result<IllnessGraph, MemoryError> {
        let path = self.version_path(disease, version);
        let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let graph: IllnessGraph = serde_json::from_str(&raw).map_err(|e| MemoryError::Corrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        graph.graph.validate().map_err(MemoryError::Graph)?;
        Ok(graph)
    }

    /// Compare-and-swap write: `graph.version` must be exactly one past the
    /// stored latest. Returns the path of the newly written version file
    /// (the unit of rollback).
    pub fn put(&self, graph: &IllnessGraph) -> Result<PathBuf, MemoryError> {
        graph.graph.validate().map_err(MemoryError::Graph)?;
        if !graph.graph.shadow_nodes.is_empty() {
            return Err(MemoryError::ShadowInIllnessGraph {
                disease: graph.disease.clone(),
            });
        }
        let _guard = self.write_lock.lock().expect("store lock poisoned");
        let latest = self.latest_version(&graph.disease)?;
        if graph.version != latest + 1 {
            return Err(MemoryError::VersionConflict {
                disease: graph.disease.clone(),
                latest,
                got: graph.version,
                expected: latest + 1,
            });
        }
        let dir = self.disease_dir(&graph.disease);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let path = self.version_path(&graph.disease, graph.version);
        // Strip any in-memory embeddings so the file holds text + structure
        // only, then write via temp + rename so readers never see a torn
        // file.
        let mut clean = graph.clone();
        clean.graph.strip_embeddings();
        let body = serde_json::to_string_pretty(&clean).map_err(|e| MemoryError::Corrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let tmp = dir.join(format!(".v{}.json.tmp", graph.version));
        fs::write(&tmp, body).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    /// Remove one stored version (used to roll back a failed training
    /// transaction). Only the latest version may be removed.
    pub fn rollback(&self, disease: &str, version: u64) -> Result<(), MemoryError> {
        let _guard = self.write_lock.lock().expect("store lock poisoned");
        let latest = self.latest_version(disease)?;
        if version != latest || version == 0 {
            return Err(MemoryError::VersionConflict {
                disease: disease.to_string(),
                latest,
                got: version,
                expected: latest,
            });
        }
        let path = self.version_path(disease, version);
        fs::remove_file(&path).map_err(|e| io_err(&path, e))
    }

    /// All diseases with at least one stored version, with their latest
    /// versions, keyed by slug directory (deterministic order).
    pub fn catalog(&self) -> Result<BTreeMap<String, u64>, MemoryError> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| io_err(&self.dir, e))? {
            let entry = entry.map_err(|e| io_err(&self.dir, e))?;
            if !entry.path().is_dir() {
                continue;
            }
            // Resolve the stored label from the newest file in the slug dir.
            let mut latest = 0u64;
            for f in fs::read_dir(entry.path()).map_err(|e| io_err(&entry.path(), e))? {
                let f = f.map_err(|e| io_err(&entry.path(), e))?;
                if let Some(v) = f
                    .file_name()
                    .to_string_lossy()
                    .strip_prefix('v')
                    .and_then(|s| s.strip_suffix(".json"))
                    .and_then(|s| s.parse::<u64>().ok())
                {
                    latest = latest.max(v);
                }
            }
            if latest > 0 {
                let path = entry.path().join(format!("v{latest}.json"));
                let raw = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                let graph: IllnessGraph =
                    serde_json::from_str(&raw).map_err(|e| MemoryError::Corrupt {
                        path: path.display().to_string(),
                        reason: e.to_string(),
                    })?;
                out.insert(graph.disease.clone(), latest);
            }
        }
        Ok(out)
    }

    /// Load the latest graph of every stored disease, keyed by label.
    pub fn load_all_latest(&self) -> Result<BTreeMap<String, IllnessGraph>, MemoryError> {
        let mut out = BTreeMap::new();
        for (disease, version) in self.catalog()? {
            out.insert(disease.clone(), self.load(&disease, version)?);
        }
        Ok(out)
    }
}
