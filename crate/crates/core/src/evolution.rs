//! Critic-driven graph and memory evolution: the training-time loop.
//!
//! Each training case is diagnosed against the current memory; a wrong
//! answer earns critic feedback that is injected into the next round's
//! perception and audit calls, up to a bounded number of rounds. A correct
//! answer consolidates the case — its single-disease graph summary merges
//! into the stored illness graph and the case is distilled into an
//! exemplar — atomically: if the exemplar write fails, the graph merge is
//! rolled back. A case that exhausts its rounds is discarded and leaves
//! both stores untouched.
//!
//! Runs are resumable: an append-only journal records one line per
//! finished case, and journaled cases are skipped on restart.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{self, GraphError, IllnessGraph, ScoreWeights, DEFAULT_TAU};
use crate::memory::{Exemplar, ExemplarStore, IllnessGraphStore, MemoryError};
use crate::providers::{GenerationRequest, Generator, PromptTemplateId, ProviderError};
use crate::reasoner::{DiagnosisAgent, MemoryView, ReasonError, ReasoningTrace};
use crate::text::normalize_label;
use crate::util::{case_seed, stable_u64};

/// Ceiling on diagnose-feedback rounds per case.
pub const DEFAULT_MAX_ROUNDS: u32 = 3;
/// Per-pathology sample cap for the seed subset.
pub const DEFAULT_SEED_CAP: usize = 20;

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("case `{case_id}`: {source}")]
    Reason {
        case_id: String,
        #[source]
        source: ReasonError,
    },
    #[error("critic feedback for case `{case_id}`: {source}")]
    Critic {
        case_id: String,
        #[source]
        source: ProviderError,
    },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("journal at {path}: {message}")]
    Journal { path: String, message: String },
    #[error("trace file at {path}: {message}")]
    TraceFile { path: String, message: String },
    #[error("evolution config: {0}")]
    Config(String),
}

/// One labeled training case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainCase {
    pub case_id: String,
    pub narrative: String,
    /// Confirmed ground-truth diagnosis.
    pub truth: String,
}

/// Loads a JSON-lines file of [`TrainCase`] records, preserving order.
pub fn load_train_cases(path: impl AsRef<Path>) -> Result<Vec<TrainCase>, EvolveError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| EvolveError::Journal {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut cases = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case: TrainCase = serde_json::from_str(line).map_err(|e| EvolveError::Journal {
            path: format!("{}:{}", path.display(), lineno + 1),
            message: e.to_string(),
        })?;
        cases.push(case);
    }
    Ok(cases)
}

/// Knobs of the evolution loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    /// Maximum diagnose-feedback rounds per case (≥ 1).
    pub max_rounds: u32,
    /// Per-pathology cap for [`sample_seed_subset`].
    pub seed_cap: usize,
    /// Similarity threshold used when merging summaries into stored graphs.
    pub tau: f64,
    pub weights: ScoreWeights,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            max_rounds: DEFAULT_MAX_ROUNDS,
            seed_cap: DEFAULT_SEED_CAP,
            tau: DEFAULT_TAU,
            weights: ScoreWeights::default(),
        }
    }
}

impl EvolutionConfig {
    /// Rejects degenerate limits (a zero round budget or seed cap).
    pub fn check(&self) -> Result<(), EvolveError> {
        if self.max_rounds == 0 {
            return Err(EvolveError::Config("max_rounds must be at least 1".into()));
        }
        if self.seed_cap == 0 {
            return Err(EvolveError::Config("seed_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// How one case ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CaseOutcome {
    /// Diagnosed correctly within the round budget; memory was updated.
    Success {
        rounds: u32,
        trace: Box<ReasoningTrace>,
    },
    /// Wrong after every round; nothing was persisted.
    Discarded { rounds: u32 },
}

/// Aggregate result of one evolution run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionStats {
    /// Cases that ran to a Success or Discarded outcome this run.
    pub processed: u64,
    pub success: u64,
    pub discarded: u64,
    /// Cases skipped because the journal already records them.
    pub skipped: u64,
    /// Cases that aborted with an error (recorded, run continues).
    pub failed: u64,
    /// Rounds used per processed case.
    pub rounds_per_case: BTreeMap<String, u32>,
    /// Successful merges per disease this run.
    pub merges_per_disease: BTreeMap<String, u64>,
    /// Error text per failed case.
    pub failures: BTreeMap<String, String>,
}

/// One journal line; the file is append-only JSON-lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct JournalEntry {
    case_id: String,
    outcome: String,
    rounds: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Uniform per-pathology subsample: every pathology keeps at most `cap`
/// cases; pathologies at or under the cap keep everything. Each pathology
/// draws from its own seeded stream, so adding cases of one disease never
/// changes another's selection. Input order is preserved.
pub fn sample_seed_subset(cases: &[TrainCase], cap: usize, seed: u64) -> Vec<TrainCase> {
    let mut by_pathology: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, case) in cases.iter().enumerate() {
        by_pathology
            .entry(normalize_label(&case.truth))
            .or_default()
            .push(i);
    }
    let mut keep: BTreeSet<usize> = BTreeSet::new();
    for (pathology, indices) in &by_pathology {
        if indices.len() <= cap {
            keep.extend(indices.iter().copied());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_u64(pathology));
        let chosen = rand::seq::index::sample(&mut rng, indices.len(), cap);
        keep.extend(chosen.iter().map(|j| indices[j]));
    }
    keep.into_iter().map(|i| cases[i].clone()).collect()
}

/// The evolution loop bound to one agent and one pair of stores.
pub struct Evolver<'a> {
    agent: &'a DiagnosisAgent,
    graphs: &'a IllnessGraphStore,
    exemplars: &'a mut ExemplarStore,
    config: EvolutionConfig,
    /// When set, each successful case's trace is serialized here and the
    /// exemplar's `trace_ref` points at the file.
    trace_dir: Option<PathBuf>,
}

impl<'a> Evolver<'a> {
    pub fn new(
        agent: &'a DiagnosisAgent,
        graphs: &'a IllnessGraphStore,
        exemplars: &'a mut ExemplarStore,
        config: EvolutionConfig,
    ) -> Result<Self, EvolveError> {
        config.check()?;
        Ok(Evolver {
            agent,
            graphs,
            exemplars,
            config,
            trace_dir: None,
        })
    }

    pub fn with_trace_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.trace_dir = Some(dir.into());
        self
    }

    /// Runs diagnose-feedback rounds for one case. On success the memory
    /// update (graph merge + exemplar) is applied atomically; a discarded
    /// case persists nothing.
    pub fn evolve_case(&mut self, case: &TrainCase, run_seed: u64) -> Result<CaseOutcome, EvolveError> {
        self.config.check()?;
        let seed = case_seed(run_seed, &case.case_id);
        let mut hints: Vec<String> = Vec::new();

        for round in 1..=self.config.max_rounds {
            let graphs = self.graphs.load_all_latest()?;
            let memory = MemoryView {
                illness_graphs: Some(&graphs),
                exemplars: Some(&*self.exemplars),
            };
            let trace = self
                .agent
                .diagnose(&case.case_id, &case.narrative, memory, &hints, run_seed)
                .map_err(|source| EvolveError::Reason {
                    case_id: case.case_id.clone(),
                    source,
                })?;

            if normalize_label(trace.diagnosis()) == normalize_label(&case.truth) {
                let trace_ref = self.persist_success(case, &trace, round)?;
                log::debug!(
                    "evolve {}: solved in round {round} ({}), exemplar at {trace_ref:?}",
                    case.case_id,
                    trace.diagnosis()
                );
                return Ok(CaseOutcome::Success {
                    rounds: round,
                    trace: Box::new(trace),
                });
            }

            if round < self.config.max_rounds {
                let feedback = self.critic_feedback(case, &trace, round, seed)?;
                hints.push(feedback);
            }
        }
        log::debug!(
            "evolve {}: still wrong after {} rounds, discarding",
            case.case_id,
            self.config.max_rounds
        );
        Ok(CaseOutcome::Discarded {
            rounds: self.config.max_rounds,
        })
    }

    /// Asks the critic why the prediction missed. The returned guidance is
    /// injected verbatim into the next round.
    fn critic_feedback(
        &self,
        case: &TrainCase,
        trace: &ReasoningTrace,
        round: u32,
        seed: u64,
    ) -> Result<String, EvolveError> {
        let summary = format!(
            "{} | facts: {}",
            trace.perception.one_liner,
            serde_json::to_string(&trace.facts).expect("facts serialize"),
        );
        let request = GenerationRequest::new(PromptTemplateId::CriticFeedback, seed)
            .bind("truth_label", &case.truth)
            .bind("predicted_label", trace.diagnosis())
            .bind("round", round.to_string())
            .bind("trace_summary", summary);
        let result = self
            .agent
            .generator()
            .generate(&request)
            .map_err(|source| EvolveError::Critic {
                case_id: case.case_id.clone(),
                source,
            })?;
        let feedback = result
            .payload
            .get("feedback")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        if feedback.is_empty() {
            return Err(EvolveError::Critic {
                case_id: case.case_id.clone(),
                source: ProviderError::SchemaViolation {
                    template: PromptTemplateId::CriticFeedback,
                    reason: "empty feedback".into(),
                    attempts: 1,
                },
            });
        }
        Ok(feedback)
    }

    /// Merge the solved case into the disease's illness graph and distill
    /// it into an exemplar — together or not at all. The merge is rolled
    /// back if the exemplar write fails.
    fn persist_success(
        &mut self,
        case: &TrainCase,
        trace: &ReasoningTrace,
        rounds: u32,
    ) -> Result<Option<PathBuf>, EvolveError> {
        let disease = trace.diagnosis().to_string();
        let summary = graph::summarize(trace.final_graph())
            .into_iter()
            .find(|(d, _)| *d == disease)
            .map(|(_, sub)| sub)
            .ok_or_else(|| {
                EvolveError::Graph(GraphError::UnknownDisease(disease.clone()))
            })?;

        let trace_path = match &self.trace_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| EvolveError::TraceFile {
                    path: dir.display().to_string(),
                    message: e.to_string(),
                })?;
                let path = dir.join(format!("{}.json", sanitize_file_stem(&case.case_id)));
                let body = serde_json::to_string_pretty(trace).expect("traces serialize");
                fs::write(&path, body).map_err(|e| EvolveError::TraceFile {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                Some(path)
            }
            None => None,
        };

        let prev = self
            .graphs
            .latest(&disease)?
            .unwrap_or_else(|| IllnessGraph::new(&disease));
        let merged = graph::merge_illness_graphs(
            &prev,
            &summary,
            self.agent.embedder().as_ref(),
            self.config.tau,
        )?;
        let merged_version = merged.version;
        self.graphs.put(&merged)?;

        let exemplar = Exemplar {
            case_id: case.case_id.clone(),
            one_liner: trace.perception.one_liner.clone(),
            narrative: case.narrative.clone(),
            diagnosis: disease.clone(),
            lesson: trace
                .critic_hints
                .last()
                .cloned()
                .unwrap_or_else(|| trace.verdict.rationale.clone()),
            trace_ref: trace_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            rounds,
        };
        if let Err(err) = self.exemplars.store_exemplar(exemplar) {
            self.graphs.rollback(&disease, merged_version)?;
            if let Some(path) = &trace_path {
                let _ = fs::remove_file(path);
            }
            return Err(err.into());
        }
        Ok(trace_path)
    }

    /// Runs the loop over `cases` in order (after per-pathology capping),
    /// skipping cases the journal already records. Case-level errors are
    /// recorded in the stats and the run continues.
    pub fn evolve(
        &mut self,
        cases: &[TrainCase],
        run_seed: u64,
        journal_path: Option<&Path>,
    ) -> Result<EvolutionStats, EvolveError> {
        self.config.check()?;
        let subset = sample_seed_subset(cases, self.config.seed_cap, run_seed);

        let mut done: BTreeSet<String> = BTreeSet::new();
        if let Some(path) = journal_path {
            if path.exists() {
                let raw = fs::read_to_string(path).map_err(|e| EvolveError::Journal {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                for (lineno, line) in raw.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let entry: JournalEntry =
                        serde_json::from_str(line).map_err(|e| EvolveError::Journal {
                            path: format!("{}:{}", path.display(), lineno + 1),
                            message: e.to_string(),
                        })?;
                    done.insert(entry.case_id);
                }
            }
        }

        let mut stats = EvolutionStats::default();
        for case in &subset {
            if done.contains(&case.case_id) {
                stats.skipped += 1;
                continue;
            }
            let entry = match self.evolve_case(case, run_seed) {
                Ok(CaseOutcome::Success { rounds, trace }) => {
                    stats.processed += 1;
                    stats.success += 1;
                    stats.rounds_per_case.insert(case.case_id.clone(), rounds);
                    *stats
                        .merges_per_disease
                        .entry(trace.diagnosis().to_string())
                        .or_default() += 1;
                    JournalEntry {
                        case_id: case.case_id.clone(),
                        outcome: "success".into(),
                        rounds,
                        error: None,
                    }
                }
                Ok(CaseOutcome::Discarded { rounds }) => {
                    stats.processed += 1;
                    stats.discarded += 1;
                    stats.rounds_per_case.insert(case.case_id.clone(), rounds);
                    JournalEntry {
                        case_id: case.case_id.clone(),
                        outcome: "discarded".into(),
                        rounds,
                        error: None,
                    }
                }
                Err(err) => {
                    log::warn!("evolve {}: {err}", case.case_id);
                    stats.failed += 1;
                    stats.failures.insert(case.case_id.clone(), err.to_string());
                    JournalEntry {
                        case_id: case.case_id.clone(),
                        outcome: "failed".into(),
                        rounds: 0,
                        error: Some(err.to_string()),
                    }
                }
            };
            if let Some(path) = journal_path {
                append_journal_line(path, &entry)?;
            }
            done.insert(case.case_id.clone());
        }
        Ok(stats)
    }
}

fn append_journal_line(path: &Path, entry: &JournalEntry) -> Result<(), EvolveError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| EvolveError::Journal {
            path: parent.display().to_string(),
            message: e.to_string(),
        })?;
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| EvolveError::Journal {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    let line = serde_json::to_string(entry).expect("journal entries serialize");
    writeln!(file, "{line}").map_err(|e| EvolveError::Journal {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Filesystem-safe file stem from a case id.
fn sanitize_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}
