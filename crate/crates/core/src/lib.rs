//! Causal-graph differential diagnosis toolkit.
//!
//! The crate is organized around a typed tri-partite evidence graph
//! ([`graph::CausalGraph`]) linking patient observations, retrieved medical
//! knowledge, and candidate diseases. On top of it sit:
//!
//! - [`reasoner`] — the staged diagnosis pipeline (perception, forward and
//!   backward evidence linking, scoring, tiered audit);
//! - [`evolution`] — the closed training loop that distills successful traces
//!   into per-disease illness graphs and an exemplar base;
//! - [`benchforge`] — construction of counterfactual control/trap case pairs
//!   from a source dataset;
//! - [`evaluation`] — paired-outcome classification, robustness metrics, and
//!   report emission;
//! - [`providers`] — pluggable generation / embedding / knowledge gateways,
//!   each with a remote HTTP backend and a deterministic seeded mock;
//! - [`memory`] — durable stores for exemplars and illness graphs.
//!
//! Everything is deterministic under the mock providers: a fixed seed and
//! fixture bundle reproduce byte-identical traces, stores, and reports.

pub mod benchforge;
pub mod config;
pub mod embed;
pub mod evaluation;
pub mod evolution;
pub mod graph;
pub mod memory;
pub mod providers;
pub mod reasoner;
pub mod text;

mod util;

pub use benchforge::{
    committee_accepts, filter_hard_candidates, load_pairs, load_source_cases, split_sentences,
    BenchError,
    BenchForge, BuildStats, CaseRecord, CounterfactualPair, Finding, JudgeScore, QualityReport,
    RejectRecord, RewriteOutcome, SourceCase,
};
pub use config::{ConfigError, RunConfig};
pub use embed::{cosine, Embedder, MockEmbedder, UnitVec};
pub use evaluation::{
    assemble_report, classify_failure_mode, classify_outcome, compute_metrics, emit_report,
    load_predictions, per_disease_breakdown, predict_pairs, score_pairs, tally_failure_modes,
    DiseaseBreakdownRow, EvalError, FailureMode, MetricsReport, PairOutcome, PairPrediction,
    PairResult, RobustnessMetrics,
};
pub use evolution::{
    load_train_cases, sample_seed_subset, CaseOutcome, EvolutionConfig, EvolutionStats,
    EvolveError, Evolver, TrainCase,
};
pub use graph::{
    CausalGraph, Edge, EdgeRelation, IllnessGraph, Importance, KnowledgeKind, KnowledgeNode,
    MergeDecision, NodeStatus, PatientNode, ScoreWeights, ShadowNode,
};
pub use providers::{
    FixtureBundle, GenerationRequest, GenerationResult, Generator, KnowledgePurpose,
    KnowledgeSnippet, KnowledgeSource, MockGenerator, PromptTemplateId, ProviderError,
};
pub use reasoner::{
    AuditVerdict, CandidateFacts, DiagnosisAgent, MemoryView, Perception, RankOutcome,
    ReasonError, ReasoningTrace, ReexamineRecord, UsedStreams, VerdictMode,
};
