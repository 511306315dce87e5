//! Run configuration: one TOML file drives every command.
//!
//! Every knob has a default tuned for the offline mock stack, so an empty
//! file (or no file at all) is a valid configuration. Unknown keys are
//! rejected rather than ignored — a typo like `epsilonn` should fail loudly,
//! not silently run with the default. [`RunConfig::check`] names the exact
//! key that is out of range; [`RunConfig::to_toml`] round-trips through
//! [`RunConfig::from_toml`] unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evolution::{EvolutionConfig, DEFAULT_MAX_ROUNDS, DEFAULT_SEED_CAP};
use crate::graph::{ScoreWeights, DEFAULT_TAU};
use crate::memory::DEFAULT_RETRIEVAL_K;
use crate::reasoner::DEFAULT_INTUITION_K;

#[derive(Debug, thiserror::Error)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        ConfigError { key: key.to_string(), message: message.into() }
    }
}

/// Model-provider selection: the deterministic mock stack (default) or
/// remote HTTP endpoints. Secrets never live in the file — only the name of
/// the environment variable holding the API key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    /// Use the seeded offline stack instead of remote endpoints.
    pub mock: bool,
    /// Run seed for the mock stack (and for case-order-independent seeding
    /// generally).
    pub seed: u64,
    /// Chat-completions endpoint URL (required when `mock = false`).
    pub generation_endpoint: String,
    /// Embedding endpoint URL (required when `mock = false`).
    pub embedding_endpoint: String,
    /// Knowledge snippet-search endpoint URL (required when `mock = false`).
    pub knowledge_endpoint: String,
    /// Model name sent to the generation endpoint.
    pub model: String,
    /// Model name sent to the embedding endpoint.
    pub embed_model: String,
    /// Environment variable the API key is read from; empty = unauthenticated.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            mock: true,
            seed: 42,
            generation_endpoint: String::new(),
            embedding_endpoint: String::new(),
            knowledge_endpoint: String::new(),
            model: String::new(),
            embed_model: String::new(),
            api_key_env: String::new(),
            timeout_secs: 30,
        }
    }
}

/// Knobs of the diagnosis pipeline itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasonerConfig {
    /// Similarity threshold for merge-or-prune and memory consolidation.
    pub tau: f64,
    /// How many candidates the fast first impression keeps.
    pub candidates: usize,
    /// How many exemplars the audit retrieves.
    pub retrieval: usize,
    pub weights: WeightsConfig,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            tau: DEFAULT_TAU,
            candidates: DEFAULT_INTUITION_K,
            retrieval: DEFAULT_RETRIEVAL_K,
            weights: WeightsConfig::default(),
        }
    }
}

/// Evidence-balance score weights (all default to 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    pub matching: f64,
    pub conflict: f64,
    pub shadow: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let w = ScoreWeights::default();
        WeightsConfig { matching: w.w_match, conflict: w.w_conflict, shadow: w.w_shadow }
    }
}

/// Knobs of the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionKnobs {
    /// Maximum critic-refinement rounds per case.
    pub max_rounds: u32,
    /// Per-pathology cap for the seed-stage subset.
    pub seed_cap: usize,
}

impl Default for EvolutionKnobs {
    fn default() -> Self {
        EvolutionKnobs { max_rounds: DEFAULT_MAX_ROUNDS, seed_cap: DEFAULT_SEED_CAP }
    }
}

/// Knobs of benchmark construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkKnobs {
    /// Hard-candidate probability gap: keep cases with
    /// |P(truth) − P(competitor)| < epsilon.
    pub epsilon: f64,
}

impl Default for BenchmarkKnobs {
    fn default() -> Self {
        BenchmarkKnobs { epsilon: crate::benchforge::DEFAULT_EPSILON }
    }
}

/// Where durable memory lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    /// Exemplar base file (JSONL, append-only).
    pub exemplars: PathBuf,
    /// Illness-graph store directory (one versioned file per disease).
    pub illness_graphs: PathBuf,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            exemplars: PathBuf::from("stores/exemplars.jsonl"),
            illness_graphs: PathBuf::from("stores/illness"),
        }
    }
}

/// The complete run configuration. See the module docs for semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory run artifacts (reports, traces, journals) land in.
    pub output_dir: PathBuf,
    pub provider: ProviderConfig,
    pub reasoner: ReasonerConfig,
    pub evolution: EvolutionKnobs,
    pub benchmark: BenchmarkKnobs,
    pub stores: StoreConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            provider: ProviderConfig::default(),
            reasoner: ReasonerConfig::default(),
            evolution: EvolutionKnobs::default(),
            benchmark: BenchmarkKnobs::default(),
            stores: StoreConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(raw: &str) -> Result<RunConfig, ConfigError> {
        let config: RunConfig = toml::from_str(raw)
            .map_err(|e| ConfigError::new("(parse)", e.message().to_string()))?;
        config.check()?;
        Ok(config)
    }

    /// Reads a config file; a missing file is an error (commands that accept
    /// an optional path fall back to [`RunConfig::default`] themselves).
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| ConfigError::new(&path.display().to_string(), e.to_string()))?;
        RunConfig::from_toml(&raw)
    }

    /// Serializes the full configuration, defaults included, as TOML that
    /// [`RunConfig::from_toml`] parses back to an equal value.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Validates every range constraint, naming the offending key.
    pub fn check(&self) -> Result<(), ConfigError> {
        let finite_nonneg = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ConfigError::new(key, format!("must be finite and >= 0, got {v}")))
            }
        };
        if !self.reasoner.tau.is_finite() || !(0.0..=1.0).contains(&self.reasoner.tau) {
            return Err(ConfigError::new(
                "reasoner.tau",
                format!("must be within [0, 1], got {}", self.reasoner.tau),
            ));
        }
        if self.reasoner.candidates == 0 {
            return Err(ConfigError::new("reasoner.candidates", "must be at least 1"));
        }
        if self.reasoner.retrieval == 0 {
            return Err(ConfigError::new("reasoner.retrieval", "must be at least 1"));
        }
        finite_nonneg("reasoner.weights.matching", self.reasoner.weights.matching)?;
        finite_nonneg("reasoner.weights.conflict", self.reasoner.weights.conflict)?;
        finite_nonneg("reasoner.weights.shadow", self.reasoner.weights.shadow)?;
        if self.evolution.max_rounds == 0 {
            return Err(ConfigError::new("evolution.max_rounds", "must be at least 1"));
        }
        if self.evolution.seed_cap == 0 {
            return Err(ConfigError::new("evolution.seed_cap", "must be at least 1"));
        }
        finite_nonneg("benchmark.epsilon", self.benchmark.epsilon)?;
        if !self.provider.mock {
            for (key, value) in [
                ("provider.generation_endpoint", &self.provider.generation_endpoint),
                ("provider.embedding_endpoint", &self.provider.embedding_endpoint),
                ("provider.knowledge_endpoint", &self.provider.knowledge_endpoint),
                ("provider.model", &self.provider.model),
            ] {
                if value.trim().is_empty() {
                    return Err(ConfigError::new(key, "required when provider.mock = false"));
                }
            }
        }
        Ok(())
    }

    pub fn score_weights(&self) -> ScoreWeights {
        ScoreWeights {
            w_match: self.reasoner.weights.matching,
            w_conflict: self.reasoner.weights.conflict,
            w_shadow: self.reasoner.weights.shadow,
        }
    }

    pub fn evolution_config(&self) -> EvolutionConfig {
        EvolutionConfig {
            max_rounds: self.evolution.max_rounds,
            seed_cap: self.evolution.seed_cap,
            tau: self.reasoner.tau,
            weights: self.score_weights(),
        }
    }
}
