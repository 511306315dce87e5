//! Knowledge retrieval: per-disease clinical snippets.
//!
//! The forward reasoning stage queries a [`KnowledgeSource`] twice per
//! candidate — once for discriminative findings, once for the typical
//! presentation. [`MockKnowledge`] answers from the fixture bundle;
//! [`CachedKnowledge`] adds a write-through disk cache so repeated runs
//! (and the remote backend) do not refetch.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graph::KnowledgeKind;
use crate::providers::fixtures::FixtureBundle;
use crate::providers::ProviderError;
use crate::text::normalize_label;
use crate::util::short_hash;

/// What a knowledge query is for; sources may answer the two purposes from
/// different indices, and cache entries are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgePurpose {
    /// Findings that discriminate this disease from close competitors.
    Discriminative,
    /// The typical presentation of the disease.
    Typical,
}

impl KnowledgePurpose {
    pub fn name(self) -> &'static str {
        match self {
            KnowledgePurpose::Discriminative => "discriminative",
            KnowledgePurpose::Typical => "typical",
        }
    }
}

/// One retrieved knowledge snippet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSnippet {
    /// Disease the snippet was retrieved for.
    pub disease: String,
    /// The clinical statement itself.
    pub content: String,
    /// Where it came from (source id, citation, fixture tag).
    pub provenance: String,
}

/// Snippet retrieval per (disease, purpose).
pub trait KnowledgeSource: Send + Sync {
    /// Fetch snippets for a disease. Unknown diseases yield an empty list,
    /// not an error: "the library has nothing on this" is a legitimate
    /// answer the reasoner must cope with.
    fn search_knowledge(
        &self,
        disease: &str,
        purpose: KnowledgePurpose,
    ) -> Result<Vec<KnowledgeSnippet>, ProviderError>;
}

impl<S: KnowledgeSource + ?Sized> KnowledgeSource for Arc<S> {
    fn search_knowledge(
        &self,
        disease: &str,
        purpose: KnowledgePurpose,
    ) -> Result<Vec<KnowledgeSnippet>, ProviderError> {
        (**self).search_knowledge(disease, purpose)
    }
}

/// Fixture-bundle-backed knowledge source. Discriminative queries return
/// the disease's pivot features, typical queries its general features.
pub struct MockKnowledge {
    bundle: Arc<FixtureBundle>,
}

impl MockKnowledge {
    pub fn new(bundle: Arc<FixtureBundle>) -> Self {
        MockKnowledge { bundle }
    }
}

impl KnowledgeSource for MockKnowledge {
    fn search_knowledge(
        &self,
        disease: &str,
        purpose: KnowledgePurpose,
    ) -> Result<Vec<KnowledgeSnippet>, ProviderError> {
        let Some(d) = self.bundle.find_disease(disease) else {
            return Ok(Vec::new());
        };
        let want = match purpose {
            KnowledgePurpose::Discriminative => KnowledgeKind::Pivot,
            KnowledgePurpose::Typical => KnowledgeKind::General,
        };
        Ok(d.features
            .iter()
            .filter(|f| f.kind == want)
            .map(|f| KnowledgeSnippet {
                disease: d.label.clone(),
                content: f.content.clone(),
                provenance: format!("fixture:{}", d.label),
            })
            .collect())
    }
}

/// Write-through disk cache around any [`KnowledgeSource`].
///
/// Entries live as one JSON file per (disease, purpose) key under `dir`.
/// A corrupt cache file is treated as a miss (refetched and rewritten),
/// never as an error.
pub struct CachedKnowledge<S> {
    inner: S,
    dir: PathBuf,
    inner_calls: AtomicU64,
}

impl<S: KnowledgeSource> CachedKnowledge<S> {
    pub fn new(inner: S, dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|e| ProviderError::Cache(format!("create {}: {e}", dir.display())))?;
        Ok(CachedKnowledge {
            inner,
            dir,
            inner_calls: AtomicU64::new(0),
        })
    }

    /// How many queries reached the wrapped source (i.e. cache misses).
    pub fn inner_calls(&self) -> u64 {
        self.inner_calls.load(Ordering::SeqCst)
    }

    fn entry_path(&self, disease: &str, purpose: KnowledgePurpose) -> PathBuf {
        let key = format!("{}|{}", normalize_label(disease), purpose.name());
        self.dir.join(format!("{}.json", short_hash(&key)))
    }
}

impl<S: KnowledgeSource> KnowledgeSource for CachedKnowledge<S> {
    fn search_knowledge(
        &self,
        disease: &str,
        purpose: KnowledgePurpose,
    ) -> Result<Vec<KnowledgeSnippet>, ProviderError> {
        let path = self.entry_path(disease, purpose);
        if let Ok(raw) = std::fs::read_to_string(&path) {
            match serde_json::from_str::<Vec<KnowledgeSnippet>>(&raw) {
                Ok(snippets) => return Ok(snippets),
                Err(e) => {
                    log::warn!("corrupt cache entry {} ({e}); refetching", path.display());
                }
            }
        }
        self.inner_calls.fetch_add(1, Ordering::SeqCst);
        let snippets = self.inner.search_knowledge(disease, purpose)?;
        let raw = serde_json::to_string_pretty(&snippets)
            .map_err(|e| ProviderError::Cache(format!("encode {}: {e}", path.display())))?;
        std::fs::write(&path, raw)
            .map_err(|e| ProviderError::Cache(format!("write {}: {e}", path.display())))?;
        Ok(snippets)
    }
}
