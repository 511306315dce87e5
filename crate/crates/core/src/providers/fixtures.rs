//! Fixture bundle: the closed world the mock backends reason over.
//!
//! A bundle declares a label space of diseases, each with a prior and a
//! list of clinical features. Features carry the substring patterns the
//! mock generator uses to "recognize" them inside narratives, plus a
//! first-person `patient_phrase` used when a feature has to be written
//! back into a narrative (trap construction, case narration).
//!
//! Bundles are plain JSON so tests and experiments can swap worlds without
//! recompiling; [`FixtureBundle::builtin`] returns the compiled-in default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{Importance, KnowledgeKind};
use crate::providers::templates::PromptTemplateId;
use crate::providers::ProviderError;
use crate::text::normalize_label;

/// One clinical feature of a disease in the fixture world.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFixture {
    /// Canonical clinical statement (becomes knowledge-node content).
    pub content: String,
    pub kind: KnowledgeKind,
    pub importance: Importance,
    /// Disease labels this feature argues for (usually just its owner).
    pub supports: Vec<String>,
    /// Disease labels this feature argues against.
    #[serde(default)]
    pub rules_out: Vec<String>,
    /// Normalized substrings that mean "a patient observation instantiates
    /// this feature". Matching happens on whitespace/punctuation-folded
    /// lowercase text.
    #[serde(default)]
    pub match_patterns: Vec<String>,
    /// Substrings hunted for during targeted re-examination of the raw
    /// narrative; falls back to `match_patterns` when empty.
    #[serde(default)]
    pub reexamine_patterns: Vec<String>,
    /// First-person sentence a patient would say for this feature.
    #[serde(default)]
    pub patient_phrase: Option<String>,
}

/// A disease with its prior probability and feature list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseFixture {
    pub label: String,
    /// Base-rate weight for the fast first-impression ranker.
    pub prior: f64,
    pub features: Vec<FeatureFixture>,
}

/// A canned response that overrides the mock generator's rule engine.
///
/// The override fires when the request's template matches and the named
/// binding contains `contains`. `payloads` are consumed one per retry
/// attempt (the last entry repeats), which lets tests script "corrupt
/// twice, then valid" sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannedResponse {
    pub template: PromptTemplateId,
    /// Name of the binding inspected for a match.
    pub match_binding: String,
    /// Substring the binding value must contain for the override to fire.
    pub contains: String,
    /// Per-attempt payloads; `payloads[min(attempt, len-1)]` is served.
    pub payloads: Vec<serde_json::Value>,
}

/// The complete closed world: diseases, embedder synonym pairs, and
/// scripted generator overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureBundle {
    pub diseases: Vec<DiseaseFixture>,
    /// Phrase pairs treated as identical by the mock embedder.
    #[serde(default)]
    pub synonyms: Vec<[String; 2]>,
    #[serde(default)]
    pub overrides: Vec<CannedResponse>,
}

const BUILTIN_BUNDLE: &str = include_str!("default_bundle.json");

impl FixtureBundle {
    /// The compiled-in default world (a small chest-pain differential).
    pub fn builtin() -> FixtureBundle {
        FixtureBundle::from_json(BUILTIN_BUNDLE)
            .expect("compiled-in fixture bundle must parse and validate")
    }

    pub fn from_json(raw: &str) -> Result<FixtureBundle, ProviderError> {
        let bundle: FixtureBundle = serde_json::from_str(raw)
            .map_err(|e| ProviderError::Config(format!("fixture bundle parse: {e}")))?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn from_path(path: &Path) -> Result<FixtureBundle, ProviderError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            ProviderError::Config(format!("fixture bundle {}: {e}", path.display()))
        })?;
        FixtureBundle::from_json(&raw)
    }

    /// Structural sanity: unique non-empty labels, priors in [0, 1], every
    /// stance target present in the label space, every feature non-empty.
    pub fn validate(&self) -> Result<(), ProviderError> {
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.diseases {
            if d.label.trim().is_empty() {
                return Err(ProviderError::Config("disease with empty label".into()));
            }
            if !seen.insert(normalize_label(&d.label)) {
                return Err(ProviderError::Config(format!(
                    "duplicate disease label `{}`",
                    d.label
                )));
            }
            if !(0.0..=1.0).contains(&d.prior) || !d.prior.is_finite() {
                return Err(ProviderError::Config(format!(
                    "disease `{}` has prior {} outside [0, 1]",
                    d.label, d.prior
                )));
            }
        }
        for d in &self.diseases {
            for f in &d.features {
                if f.content.trim().is_empty() {
                    return Err(ProviderError::Config(format!(
                        "disease `{}` has a feature with empty content",
                        d.label
                    )));
                }
                for target in f.supports.iter().chain(f.rules_out.iter()) {
                    if !self.has_label(target) {
                        return Err(ProviderError::Config(format!(
                            "feature `{}` references unknown disease `{target}`",
                            f.content
                        )));
                    }
                }
            }
        }
        for pair in &self.synonyms {
            if pair.iter().any(|s| s.trim().is_empty()) {
                return Err(ProviderError::Config("empty synonym entry".into()));
            }
        }
        Ok(())
    }

    /// Disease labels in declaration order.
    pub fn label_space(&self) -> Vec<String> {
        self.diseases.iter().map(|d| d.label.clone()).collect()
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.find_disease(label).is_some()
    }

    /// Case/whitespace-insensitive label lookup.
    pub fn find_disease(&self, label: &str) -> Option<&DiseaseFixture> {
        let want = normalize_label(label);
        self.diseases.iter().find(|d| normalize_label(&d.label) == want)
    }

    /// Find the feature (and its owning disease) whose content matches
    /// exactly up to label normalization.
    pub fn feature_by_content(&self, content: &str) -> Option<(&DiseaseFixture, &FeatureFixture)> {
        let want = normalize_label(content);
        for d in &self.diseases {
            for f in &d.features {
                if normalize_label(&f.content) == want {
                    return Some((d, f));
                }
            }
        }
        None
    }

    /// Synonym pairs in the shape [`crate::embed::MockEmbedder::with_synonyms`]
    /// accepts.
    pub fn synonym_pairs(&self) -> Vec<(String, String)> {
        self.synonyms
            .iter()
            .map(|[a, b]| (a.clone(), b.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_bundle_parses_and_validates() {
        let b = FixtureBundle::builtin();
        assert!(b.diseases.len() >= 6);
        assert!(b.has_label("pulmonary embolism"));
        assert!(b.has_label("Spontaneous Pneumothorax"));
        assert!(!b.has_label("Boerhaave syndrome"));
    }

    #[test]
    fn priors_are_valid_and_stances_resolve() {
        let b = FixtureBundle::builtin();
        for d in &b.diseases {
            assert!((0.0..=1.0).contains(&d.prior), "{}", d.label);
            for f in &d.features {
                assert!(!f.supports.is_empty() || !f.rules_out.is_empty(), "{}", f.content);
            }
        }
    }

    #[test]
    fn unknown_stance_target_is_rejected() {
        let raw = r#"{
            "diseases": [{
                "label": "A", "prior": 0.5,
                "features": [{
                    "content": "x", "kind": "general", "importance": "typical",
                    "supports": ["Nonexistent"]
                }]
            }]
        }"#;
        let err = FixtureBundle::from_json(raw).unwrap_err();
        assert!(err.to_string().contains("Nonexistent"), "{err}");
    }

    #[test]
    fn duplicate_label_is_rejected_up_to_normalization() {
        let raw = r#"{
            "diseases": [
                {"label": "Influenza", "prior": 0.1, "features": []},
                {"label": "influenza ", "prior": 0.2, "features": []}
            ]
        }"#;
        assert!(FixtureBundle::from_json(raw).is_err());
    }

    #[test]
    fn feature_lookup_by_content_is_normalization_insensitive() {
        let b = FixtureBundle::builtin();
        let (d, f) = b.feature_by_content("history of deep vein thrombosis (dvt)").unwrap();
        assert_eq!(d.label, "Pulmonary Embolism");
        assert_eq!(f.kind, KnowledgeKind::Pivot);
        assert_eq!(f.importance, Importance::Essential);
        assert_eq!(f.rules_out, vec!["Spontaneous Pneumothorax".to_string()]);
    }
}
