//! Counterfactual benchmark construction.
//!
//! The pipeline turns structured diagnostic cases into control/trap
//! narrative pairs: keep only cases whose differential is nearly tied
//! between the true diagnosis and its top competitor, narrate them in the
//! first person, swap the one discriminative piece of evidence for the
//! competitor's, and keep the pairs a three-judge committee accepts. The
//! trap narrative is a minimal counterfactual: it differs from the control
//! in exactly one sentence, and its correct answer is the competitor.
//!
//! Runs are resumable (append-only journal) and byte-deterministic: output
//! files are sorted by case id regardless of worker scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::providers::{
    FixtureBundle, GenerationRequest, Generator, KnowledgePurpose, KnowledgeSnippet,
    KnowledgeSource, MockGenerator, MockKnowledge, PromptTemplateId, ProviderError,
};
use crate::text::{normalize_label, normalize_match};
use crate::util::case_seed;

/// Largest probability gap that still counts as "nearly tied".
pub const DEFAULT_EPSILON: f64 = 0.005;
/// Size of the verification committee.
pub const JUDGE_COUNT: usize = 3;
/// Positive votes required to accept a pair.
pub const ACCEPT_VOTES: usize = 2;
/// Narration attempts (initial ask + re-asks) before giving up on coverage.
pub const NARRATE_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{stage}: {source}")]
    Provider {
        stage: &'static str,
        #[source]
        source: ProviderError,
    },
    #[error("source cases at {path}: {message}")]
    Source { path: String, message: String },
    #[error(
        "narration for case `{case_id}` missed required content after {attempts} attempts: {missing:?}"
    )]
    NarrationCoverage {
        case_id: String,
        attempts: u32,
        missing: Vec<String>,
    },
    #[error("benchmark config: {0}")]
    Config(String),
    #[error("output file {path}: {message}")]
    Output { path: String, message: String },
    #[error("journal at {path}: {message}")]
    Journal { path: String, message: String },
}

/// One structured finding of a source case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    /// Stable evidence code from the source dataset.
    pub code: String,
    /// First-person phrase, narratable as-is.
    pub text: String,
    /// History item (Antecedents section) vs current symptom.
    #[serde(default)]
    pub antecedent: bool,
    /// Present findings must be covered by the narration; absent findings
    /// are not narrated.
    #[serde(default = "default_true")]
    pub present: bool,
}

fn default_true() -> bool {
    true
}

fn default_region() -> String {
    "Unknown".to_string()
}

/// A structured diagnostic case as ingested from disk. Field names accept
/// the upper-case spellings common in public triage datasets (`AGE`,
/// `SEX`, `PATHOLOGY`, `EVIDENCES`, `DIFFERENTIAL_DIAGNOSIS`), and the
/// differential may be either a label→probability map or a list of
/// `[label, probability]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCase {
    #[serde(alias = "ID")]
    pub id: String,
    #[serde(alias = "SEX")]
    pub sex: String,
    #[serde(alias = "AGE")]
    pub age: u32,
    #[serde(default = "default_region", alias = "REGION")]
    pub region: String,
    #[serde(alias = "EVIDENCES", deserialize_with = "de_findings")]
    pub evidences: Vec<Finding>,
    /// Differential distribution: disease label → probability.
    #[serde(alias = "DIFFERENTIAL_DIAGNOSIS", deserialize_with = "de_differential")]
    pub differential: BTreeMap<String, f64>,
    /// Confirmed diagnosis label.
    #[serde(alias = "PATHOLOGY")]
    pub pathology: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FindingRepr {
    /// A bare evidence code; narrated as the code itself. Callers wanting
    /// readable narratives should pre-join codes with their phrases.
    Coded(String),
    Full(Finding),
}

fn de_findings<'de, D>(de: D) -> Result<Vec<Finding>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let raw = Vec::<FindingRepr>::deserialize(de)?;
    Ok(raw
        .into_iter()
        .map(|r| match r {
            FindingRepr::Full(f) => f,
            FindingRepr::Coded(code) => Finding {
                text: code.clone(),
                code,
                antecedent: false,
                present: true,
            },
        })
        .collect())
}

fn de_differential<'de, D>(de: D) -> Result<BTreeMap<String, f64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Map(BTreeMap<String, f64>),
        Pairs(Vec<(String, f64)>),
    }
    Ok(match Repr::deserialize(de)? {
        Repr::Map(m) => m,
        Repr::Pairs(p) => p.into_iter().collect(),
    })
}

impl SourceCase {
    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty case id".into());
        }
        if self.pathology.trim().is_empty() {
            return Err(format!("case `{}`: empty pathology label", self.id));
        }
        if self.differential.is_empty() {
            return Err(format!("case `{}`: empty differential", self.id));
        }
        for (label, p) in &self.differential {
            if !p.is_finite() || *p < 0.0 {
                return Err(format!(
                    "case `{}`: probability {p} for `{label}` is not a finite non-negative number",
                    self.id
                ));
            }
        }
        for f in &self.evidences {
            if f.text.trim().is_empty() {
                return Err(format!("case `{}`: finding `{}` has empty text", self.id, f.code));
            }
        }
        Ok(())
    }

    /// Probability assigned to the confirmed diagnosis, if listed.
    fn truth_probability(&self) -> Option<f64> {
        let want = normalize_label(&self.pathology);
        self.differential
            .iter()
            .find(|(label, _)| normalize_label(label) == want)
            .map(|(_, p)| *p)
    }

    /// Highest-probability competing diagnosis; ties break to the
    /// lexicographically smallest label.
    fn top_competitor(&self) -> Option<(&str, f64)> {
        let truth = normalize_label(&self.pathology);
        let mut best: Option<(&str, f64)> = None;
        for (label, p) in &self.differential {
            if normalize_label(label) == truth {
                continue;
            }
            // BTreeMap iterates labels ascending, so on ties the first
            // (smallest) label sticks.
            if best.is_none_or(|(_, bp)| *p > bp) {
                best = Some((label.as_str(), *p));
            }
        }
        best
    }
}

/// Loads a JSON-lines file of [`SourceCase`] records, preserving order.
pub fn load_source_cases(path: impl AsRef<Path>) -> Result<Vec<SourceCase>, BenchError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| BenchError::Source {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut cases = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), lineno + 1);
        let case: SourceCase = serde_json::from_str(line).map_err(|e| BenchError::Source {
            path: at(),
            message: e.to_string(),
        })?;
        case.check().map_err(|message| BenchError::Source {
            path: at(),
            message,
        })?;
        cases.push(case);
    }
    Ok(cases)
}

/// Loads finished benchmark pairs (one JSON object per line, as written by
/// [`BenchForge::build_benchmark`]); each pair is structurally checked.
/// Blank lines are skipped.
pub fn load_pairs(path: &Path) -> Result<Vec<CounterfactualPair>, BenchError> {
    let raw = fs::read_to_string(path).map_err(|e| BenchError::Source {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut pairs = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), lineno + 1);
        let pair: CounterfactualPair =
            serde_json::from_str(line).map_err(|e| BenchError::Source {
                path: at(),
                message: e.to_string(),
            })?;
        pair.check().map_err(|message| BenchError::Source { path: at(), message })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Why a case did or did not survive the hard-candidate filter.
enum FilterFate<'a> {
    Hard { y_bias: &'a str },
    MissingTruth,
    NoCompetitor,
    OutsideGap,
}

fn case_fate(case: &SourceCase, epsilon: f64) -> FilterFate<'_> {
    let Some(p_truth) = case.truth_probability() else {
        return FilterFate::MissingTruth;
    };
    let Some((y_bias, p_bias)) = case.top_competitor() else {
        return FilterFate::NoCompetitor;
    };
    if (p_truth - p_bias).abs() < epsilon {
        FilterFate::Hard { y_bias }
    } else {
        FilterFate::OutsideGap
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), BenchError> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(BenchError::Config(format!(
            "epsilon must be a finite non-negative number, got {epsilon}"
        )));
    }
    Ok(())
}

/// Keeps cases whose confirmed diagnosis and top competitor are within
/// `epsilon` of each other in the differential, pairing each with that
/// competitor. Cases whose differential does not list the confirmed
/// diagnosis (or lists nothing else) are skipped with a warning.
pub fn filter_hard_candidates(
    cases: &[SourceCase],
    epsilon: f64,
) -> Result<Vec<(SourceCase, String)>, BenchError> {
    check_epsilon(epsilon)?;
    let mut out = Vec::new();
    for case in cases {
        match case_fate(case, epsilon) {
            FilterFate::Hard { y_bias } => out.push((case.clone(), y_bias.to_string())),
            FilterFate::MissingTruth => {
                log::warn!(
                    "case `{}`: differential does not list the confirmed diagnosis `{}`; skipping",
                    case.id,
                    case.pathology
                );
            }
            FilterFate::NoCompetitor => {
                log::warn!("case `{}`: no competing diagnosis in the differential; skipping", case.id);
            }
            FilterFate::OutsideGap => {}
        }
    }
    Ok(out)
}

/// Splits text into sentences: hard breaks at newlines, and within a line
/// after terminal punctuation (`.`, `?`, `!`) followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut current = String::new();
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            current.push(c);
            if matches!(c, '.' | '?' | '!') && chars.peek().is_some_and(|n| n.is_whitespace()) {
                let s = current.trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                current.clear();
            }
        }
        let s = current.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    }
    out
}

/// Committee decision rule: accepted iff at least [`ACCEPT_VOTES`] of the
/// correctness votes are positive. Pure function of the votes.
pub fn committee_accepts(votes: &[bool]) -> bool {
    votes.iter().filter(|v| **v).count() >= ACCEPT_VOTES
}

/// One judge's quality scores; `None` when the judge failed outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub plausibility: Option<u8>,
    pub fluency: Option<u8>,
}

/// A control/trap narrative pair with its verification record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub pair_id: String,
    /// Control narrative; its correct answer is `y_gt`.
    pub control: String,
    /// Trap narrative; its correct answer is `y_bias`.
    pub trap: String,
    pub y_gt: String,
    pub y_bias: String,
    /// Discriminative phrase removed from the control.
    pub k_gt: String,
    /// Competitor evidence substituted in its place.
    pub k_trap: String,
    /// Per-judge correctness votes.
    pub votes: Vec<bool>,
    /// Per-judge quality scores, aligned with `votes`.
    pub scores: Vec<JudgeScore>,
}

impl CounterfactualPair {
    pub fn is_accepted(&self) -> bool {
        committee_accepts(&self.votes)
    }

    /// Structural invariants every emitted pair must satisfy.
    pub fn check(&self) -> Result<(), String> {
        if normalize_label(&self.y_gt) == normalize_label(&self.y_bias) {
            return Err(format!(
                "pair `{}`: control and trap answers are the same label",
                self.pair_id
            ));
        }
        if self.k_gt.trim().is_empty() || !self.control.contains(&self.k_gt) {
            return Err(format!(
                "pair `{}`: discriminative phrase is not verbatim in the control narrative",
                self.pair_id
            ));
        }
        if self.votes.len() != self.scores.len() {
            return Err(format!("pair `{}`: votes/scores length mismatch", self.pair_id));
        }
        Ok(())
    }
}

/// Result of the three-call rewrite chain: either a validated trap
/// narrative or a rejection with a machine-readable reason code.
#[derive(Debug, Clone, PartialEq)]
pub enum RewriteOutcome {
    Pass {
        k_gt: String,
        k_trap: String,
        trap_narrative: String,
    },
    Reject {
        reason: String,
    },
}

/// Per-case record in the journal and output files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaseRecord {
    Accepted { pair: CounterfactualPair },
    Rejected { reject: RejectRecord },
}

impl CaseRecord {
    pub fn case_id(&self) -> &str {
        match self {
            CaseRecord::Accepted { pair } => &pair.pair_id,
            CaseRecord::Rejected { reject } => &reject.case_id,
        }
    }
}

/// Why one case produced no accepted pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub case_id: String,
    /// Pipeline stage that rejected the case: `narrate`, `rewrite`,
    /// `verify`, or `error` for hard failures.
    pub stage: String,
    pub reason: String,
    /// Fully-built pair for verification-stage rejects; earlier stages
    /// have nothing to attach.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<CounterfactualPair>,
}

/// Score histogram with its simple summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    /// score (1–10) → number of judge scores.
    pub histogram: BTreeMap<u8, u64>,
    pub count: u64,
    pub mean: Option<f64>,
}

impl ScoreStats {
    fn add(&mut self, score: u8) {
        *self.histogram.entry(score).or_default() += 1;
        self.count += 1;
    }

    fn finish(&mut self) {
        if self.count > 0 {
            let sum: u64 = self.histogram.iter().map(|(s, n)| u64::from(*s) * n).sum();
            self.mean = Some(sum as f64 / self.count as f64);
        }
    }
}

/// One quality metric split by committee verdict.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSplit {
    pub accepted: ScoreStats,
    pub rejected: ScoreStats,
}

/// Outcome slots for the out-of-band clinical review of emitted pairs.
/// The construction pipeline itself never fills these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalReview {
    pub reviewed: u64,
    pub approved: u64,
    pub notes: String,
}

/// Aggregate counts and score distributions for one construction run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub source_cases: u64,
    /// Differential did not list the confirmed diagnosis.
    pub missing_truth: u64,
    /// Differential listed nothing but the confirmed diagnosis.
    pub no_competitor: u64,
    /// Probability gap at or above epsilon.
    pub outside_gap: u64,
    pub hard_candidates: u64,
    pub accepted: u64,
    /// Validation rejections (narrate/rewrite/verify stages).
    pub rejected: u64,
    /// Hard per-case failures (provider/transport errors).
    pub failed: u64,
    /// Rejection reason code → count, validation rejections only.
    pub reject_reasons: BTreeMap<String, u64>,
    pub plausibility: ScoreSplit,
    pub fluency: ScoreSplit,
    pub external_review: Option<ExternalReview>,
}

/// Run-level result of [`BenchForge::build_benchmark`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    /// Cases processed this run.
    pub processed: u64,
    /// Cases skipped because the journal already records them.
    pub skipped: u64,
    pub report: QualityReport,
}

/// The benchmark construction pipeline bound to its backends.
pub struct BenchForge {
    generator: Arc<dyn Generator>,
    judges: Vec<Arc<dyn Generator>>,
    knowledge: Arc<dyn KnowledgeSource>,
    /// Phrase pairs treated as equivalent by the narration validator.
    synonyms: Vec<(String, String)>,
    epsilon: f64,
    parallel: usize,
}

impl BenchForge {
    pub fn new(
        generator: Arc<dyn Generator>,
        judges: Vec<Arc<dyn Generator>>,
        knowledge: Arc<dyn KnowledgeSource>,
        synonyms: Vec<(String, String)>,
    ) -> Result<Self, BenchError> {
        if judges.len() != JUDGE_COUNT {
            return Err(BenchError::Config(format!(
                "expected {JUDGE_COUNT} judges, got {}",
                judges.len()
            )));
        }
        Ok(BenchForge {
            generator,
            judges,
            knowledge,
            synonyms,
            epsilon: DEFAULT_EPSILON,
            parallel: 1,
        })
    }

    /// Fully mock-backed pipeline over one fixture bundle: one narrator
    /// backend plus three judge backends with distinct seeds.
    pub fn mock(bundle: Arc<FixtureBundle>, seed: u64) -> BenchForge {
        let judges = (0..JUDGE_COUNT as u64)
            .map(|j| {
                Arc::new(MockGenerator::gateway(bundle.clone(), seed.wrapping_add(j + 1)))
                    as Arc<dyn Generator>
            })
            .collect();
        BenchForge::new(
            Arc::new(MockGenerator::gateway(bundle.clone(), seed)),
            judges,
            Arc::new(MockKnowledge::new(bundle.clone())),
            bundle.synonym_pairs(),
        )
        .expect("mock committee has the right size")
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Worker threads for case processing; output order is unaffected.
    pub fn with_parallel(mut self, workers: usize) -> Self {
        self.parallel = workers.max(1);
        self
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// True when `finding_text` (or a synonym-substituted variant of it)
    /// appears in the narrative, on punctuation-folded lowercase text.
    fn narration_covers(&self, narrative: &str, finding_text: &str) -> bool {
        let hay = normalize_match(narrative);
        let needle = normalize_match(finding_text);
        if needle.is_empty() || hay.contains(&needle) {
            return true;
        }
        self.synonyms.iter().any(|(a, b)| {
            let a = normalize_match(a);
            let b = normalize_match(b);
            (!a.is_empty() && needle.contains(&a) && hay.contains(&needle.replace(&a, &b)))
                || (!b.is_empty() && needle.contains(&b) && hay.contains(&needle.replace(&b, &a)))
        })
    }

    /// Renders a structured case into a first-person narrative and
    /// validates coverage: every present finding must be mentioned and the
    /// standard intake layout (demographics header, Symptoms, Antecedents)
    /// must survive. Re-asks a bounded number of times, then errors.
    pub fn narrate(&self, case: &SourceCase, seed: u64) -> Result<String, BenchError> {
        let section = |antecedent: bool| -> Vec<&str> {
            case.evidences
                .iter()
                .filter(|f| f.present && f.antecedent == antecedent)
                .map(|f| f.text.as_str())
                .collect()
        };
        let case_json = serde_json::json!({
            "sex": case.sex,
            "age": case.age,
            "region": case.region,
            "symptoms": section(false),
            "antecedents": section(true),
        })
        .to_string();

        let mut missing: Vec<String> = Vec::new();
        for attempt in 0..NARRATE_ATTEMPTS {
            let mut request = GenerationRequest::new(
                PromptTemplateId::Narrate,
                seed.wrapping_add(u64::from(attempt)),
            )
            .bind("case", &case_json);
            if attempt > 0 {
                request = request.bind("revision", attempt.to_string()).bind(
                    "missing",
                    serde_json::to_string(&missing).expect("string list serializes"),
                );
            }
            let result = self
                .generator
                .generate(&request)
                .map_err(|source| BenchError::Provider { stage: "narrate", source })?;
            let narrative = result
                .payload
                .get("narrative")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();

            missing = case
                .evidences
                .iter()
                .filter(|f| f.present && !self.narration_covers(&narrative, &f.text))
                .map(|f| f.text.clone())
                .collect();
            if !layout_ok(&narrative) {
                missing.push("standard intake layout (Sex/Age/Region, Symptoms, Antecedents)".into());
            }
            if missing.is_empty() {
                return Ok(narrative);
            }
            log::warn!(
                "narration attempt {attempt} for case `{}` left content uncovered: {missing:?}",
                case.id
            );
        }
        Err(BenchError::NarrationCoverage {
            case_id: case.id.clone(),
            attempts: NARRATE_ATTEMPTS,
            missing,
        })
    }

    fn knowledge_for(&self, disease: &str) -> Result<Vec<KnowledgeSnippet>, BenchError> {
        let mut out = Vec::new();
        for purpose in [KnowledgePurpose::Discriminative, KnowledgePurpose::Typical] {
            out.extend(
                self.knowledge
                    .search_knowledge(disease, purpose)
                    .map_err(|source| BenchError::Provider { stage: "knowledge", source })?,
            );
        }
        Ok(out)
    }

    /// The three-call rewrite chain: extract the discriminative phrase,
    /// generate the competitor's substitute, rewrite the narrative — then
    /// validate that the phrase was verbatim, the substitute is grounded
    /// in the competitor's knowledge, and the edit touched exactly one
    /// sentence. Validation failures reject the pair with a reason code.
    pub fn rewrite_pair(
        &self,
        control: &str,
        y_gt: &str,
        y_bias: &str,
        seed: u64,
    ) -> Result<RewriteOutcome, BenchError> {
        let reject = |reason: &str| {
            Ok(RewriteOutcome::Reject {
                reason: reason.to_string(),
            })
        };
        let gt_snippets = self.knowledge_for(y_gt)?;
        let bias_snippets = self.knowledge_for(y_bias)?;
        if gt_snippets.is_empty() || bias_snippets.is_empty() {
            return reject("missing-knowledge");
        }
        let gt_json = serde_json::to_string(&gt_snippets).expect("snippets serialize");
        let bias_json = serde_json::to_string(&bias_snippets).expect("snippets serialize");

        let ask = |template, request: GenerationRequest, stage| {
            self.generator
                .generate(&request)
                .map_err(|source| BenchError::Provider { stage, source })
                .map(move |r| (template, r))
        };

        let (_, extracted) = ask(
            PromptTemplateId::ExtractDiscriminative,
            GenerationRequest::new(PromptTemplateId::ExtractDiscriminative, seed)
                .bind("narrative", control)
                .bind("control_diagnosis", y_gt)
                .bind("trap_diagnosis", y_bias)
                .bind("control_knowledge", &gt_json)
                .bind("trap_knowledge", &bias_json),
            "extract_discriminative",
        )?;
        let k_gt = payload_phrase(&extracted.payload);
        if k_gt.trim().is_empty() {
            return reject("no-discriminative-phrase");
        }
        if !control.contains(&k_gt) {
            return reject("phrase-not-verbatim");
        }

        let (_, trap_info) = ask(
            PromptTemplateId::GenTrapInfo,
            GenerationRequest::new(PromptTemplateId::GenTrapInfo, seed)
                .bind("phrase_out", &k_gt)
                .bind("trap_diagnosis", y_bias)
                .bind("trap_knowledge", &bias_json),
            "gen_trap_info",
        )?;
        let k_trap = payload_phrase(&trap_info.payload);
        if k_trap.trim().is_empty() {
            return reject("no-trap-phrase");
        }
        if !grounded_in(&k_trap, &bias_snippets) {
            return reject("ungrounded-trap");
        }

        let (_, rewritten) = ask(
            PromptTemplateId::RewriteNarrative,
            GenerationRequest::new(PromptTemplateId::RewriteNarrative, seed)
                .bind("narrative", control)
                .bind("phrase_out", &k_gt)
                .bind("phrase_in", &k_trap),
            "rewrite_narrative",
        )?;
        let trap_narrative = rewritten
            .payload
            .get("narrative")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();

        let control_sentences = split_sentences(control);
        let trap_sentences = split_sentences(&trap_narrative);
        if control_sentences.len() != trap_sentences.len() {
            return reject("multi-sentence-edit");
        }
        let diffs: Vec<usize> = (0..control_sentences.len())
            .filter(|&i| control_sentences[i] != trap_sentences[i])
            .collect();
        match diffs.as_slice() {
            [] => reject("unchanged-narrative"),
            [i] => {
                let swapped_out = normalize_match(&control_sentences[*i]);
                let swapped_in = normalize_match(&trap_sentences[*i]);
                if !swapped_out.contains(&normalize_match(&k_gt))
                    || !swapped_in.contains(&normalize_match(&k_trap))
                {
                    return reject("misplaced-edit");
                }
                Ok(RewriteOutcome::Pass {
                    k_gt,
                    k_trap,
                    trap_narrative,
                })
            }
            _ => reject("multi-sentence-edit"),
        }
    }

    /// Puts the pair to the committee, filling `votes` and `scores`. A
    /// judge that fails outright counts as a negative vote with no scores
    /// (conservative toward dataset quality). Returns the accept decision.
    pub fn verify_pair(&self, pair: &mut CounterfactualPair, seed: u64) -> bool {
        pair.votes.clear();
        pair.scores.clear();
        for (j, judge) in self.judges.iter().enumerate() {
            let request = GenerationRequest::new(
                PromptTemplateId::JudgeVerify,
                seed.wrapping_add(j as u64),
            )
            .bind("narrative", &pair.trap)
            .bind("trap_diagnosis", &pair.y_bias)
            .bind("control_diagnosis", &pair.y_gt)
            .bind("phrase_out", &pair.k_gt)
            .bind("phrase_in", &pair.k_trap);
            match judge.generate(&request) {
                Ok(result) => {
                    let vote = result
                        .payload
                        .get("correct")
                        .and_then(Value::as_bool)
                        .unwrap_or(false);
                    let score = |key: &str| {
                        result.payload.get(key).and_then(Value::as_u64).map(|v| v as u8)
                    };
                    pair.votes.push(vote);
                    pair.scores.push(JudgeScore {
                        plausibility: score("plausibility"),
                        fluency: score("fluency"),
                    });
                }
                Err(err) => {
                    log::warn!(
                        "judge {j} failed for pair `{}`; counting a negative vote: {err}",
                        pair.pair_id
                    );
                    pair.votes.push(false);
                    pair.scores.push(JudgeScore {
                        plausibility: None,
                        fluency: None,
                    });
                }
            }
        }
        pair.is_accepted()
    }

    /// One case, filter-to-verdict. Hard errors become `error`-stage
    /// reject records so the run can continue.
    fn process_case(&self, case: &SourceCase, y_bias: &str, run_seed: u64) -> CaseRecord {
        let seed = case_seed(run_seed, &case.id);
        let rejected = |stage: &str, reason: String, pair: Option<CounterfactualPair>| {
            CaseRecord::Rejected {
                reject: RejectRecord {
                    case_id: case.id.clone(),
                    stage: stage.to_string(),
                    reason,
                    pair,
                },
            }
        };

        let control = match self.narrate(case, seed) {
            Ok(n) => n,
            Err(err @ BenchError::NarrationCoverage { .. }) => {
                return rejected("narrate", err.to_string(), None)
            }
            Err(err) => return rejected("error", err.to_string(), None),
        };
        let outcome = match self.rewrite_pair(&control, &case.pathology, y_bias, seed) {
            Ok(o) => o,
            Err(err) => return rejected("error", err.to_string(), None),
        };
        match outcome {
            RewriteOutcome::Reject { reason } => rejected("rewrite", reason, None),
            RewriteOutcome::Pass {
                k_gt,
                k_trap,
                trap_narrative,
            } => {
                let mut pair = CounterfactualPair {
                    pair_id: case.id.clone(),
                    control,
                    trap: trap_narrative,
                    y_gt: case.pathology.clone(),
                    y_bias: y_bias.to_string(),
                    k_gt,
                    k_trap,
                    votes: Vec::new(),
                    scores: Vec::new(),
                };
                if self.verify_pair(&mut pair, seed) {
                    CaseRecord::Accepted { pair }
                } else {
                    rejected("verify", "insufficient-votes".to_string(), Some(pair))
                }
            }
        }
    }

    /// Runs the whole pipeline over a JSON-lines source file and writes
    /// `pairs.jsonl` (accepted), `rejects.jsonl`, `report.json`, and
    /// `report.csv` under `out_dir`, all sorted by case id. A journal path
    /// makes the run resumable; per-case failures are recorded and the
    /// run continues.
    pub fn build_benchmark(
        &self,
        source: &Path,
        out_dir: &Path,
        run_seed: u64,
        journal_path: Option<&Path>,
    ) -> Result<BuildStats, BenchError> {
        check_epsilon(self.epsilon)?;
        let cases = load_source_cases(source)?;

        let mut report = QualityReport {
            source_cases: cases.len() as u64,
            ..QualityReport::default()
        };
        let mut hard: Vec<(&SourceCase, &str)> = Vec::new();
        for case in &cases {
            match case_fate(case, self.epsilon) {
                FilterFate::Hard { y_bias } => hard.push((case, y_bias)),
                FilterFate::MissingTruth => report.missing_truth += 1,
                FilterFate::NoCompetitor => report.no_competitor += 1,
                FilterFate::OutsideGap => report.outside_gap += 1,
            }
        }
        report.hard_candidates = hard.len() as u64;

        let mut records: BTreeMap<String, CaseRecord> = BTreeMap::new();
        if let Some(path) = journal_path {
            for record in read_journal(path)? {
                records.insert(record.case_id().to_string(), record);
            }
        }
        let pending: Vec<(&SourceCase, &str)> = hard
            .iter()
            .filter(|(case, _)| !records.contains_key(&case.id))
            .copied()
            .collect();
        let skipped = (hard.len() - pending.len()) as u64;
        let processed = pending.len() as u64;

        let shared = Mutex::new(&mut records);
        let journal_err: Mutex<Option<BenchError>> = Mutex::new(None);
        let next = AtomicUsize::new(0);
        let workers = self.parallel.min(pending.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= pending.len() {
                        break;
                    }
                    let (case, y_bias) = pending[i];
                    let record = self.process_case(case, y_bias, run_seed);
                    let mut guard = shared.lock().expect("collector lock poisoned");
                    if let Some(path) = journal_path {
                        if let Err(e) = append_journal(path, &record) {
                            journal_err.lock().expect("error slot").get_or_insert(e);
                        }
                    }
                    guard.insert(case.id.clone(), record);
                });
            }
        });
        if let Some(err) = journal_err.into_inner().expect("error slot") {
            return Err(err);
        }

        // Journals may hold records for cases no longer in the source (or
        // filtered differently); only current hard candidates are emitted.
        let hard_ids: BTreeSet<&str> = hard.iter().map(|(c, _)| c.id.as_str()).collect();
        records.retain(|id, _| hard_ids.contains(id.as_str()));

        finish_report(&mut report, &records);
        write_outputs(out_dir, &records, &report)?;
        Ok(BuildStats {
            processed,
            skipped,
            report,
        })
    }
}

fn payload_phrase(payload: &Value) -> String {
    payload
        .get("phrase")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .trim()
        .to_string()
}

fn layout_ok(narrative: &str) -> bool {
    let lower = narrative.to_lowercase();
    ["sex:", "age:", "geographical region:", "symptoms:", "antecedents:"]
        .iter()
        .all(|header| lower.contains(header))
}

/// A trap phrase is grounded when some competitor snippet plausibly speaks
/// about the same clinical content as the phrase (see
/// [`crate::text::shares_content`]) — the slack covers register shifts
/// between first-person phrasing and clinical statements.
fn grounded_in(k_trap: &str, snippets: &[KnowledgeSnippet]) -> bool {
    snippets.iter().any(|s| crate::text::shares_content(&s.content, k_trap))
}

fn read_journal(path: &Path) -> Result<Vec<CaseRecord>, BenchError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let raw = fs::read_to_string(path).map_err(|e| BenchError::Journal {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CaseRecord = serde_json::from_str(line).map_err(|e| BenchError::Journal {
            path: format!("{}:{}", path.display(), lineno + 1),
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn append_journal(path: &Path, record: &CaseRecord) -> Result<(), BenchError> {
    let journal_err = |e: std::io::Error| BenchError::Journal {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(journal_err)?;
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(journal_err)?;
    let line = serde_json::to_string(record).expect("case records serialize");
    writeln!(file, "{line}").map_err(journal_err)
}

fn finish_report(report: &mut QualityReport, records: &BTreeMap<String, CaseRecord>) {
    let mut add_scores = |scores: &[JudgeScore], accepted: bool| {
        for s in scores {
            let (plaus, flue) = if accepted {
                (&mut report.plausibility.accepted, &mut report.fluency.accepted)
            } else {
                (&mut report.plausibility.rejected, &mut report.fluency.rejected)
            };
            if let Some(p) = s.plausibility {
                plaus.add(p);
            }
            if let Some(f) = s.fluency {
                flue.add(f);
            }
        }
    };
    for record in records.values() {
        match record {
            CaseRecord::Accepted { pair } => {
                report.accepted += 1;
                add_scores(&pair.scores, true);
            }
            CaseRecord::Rejected { reject } => {
                if reject.stage == "error" {
                    report.failed += 1;
                } else {
                    report.rejected += 1;
                    *report.reject_reasons.entry(reject.reason.clone()).or_default() += 1;
                }
                if let Some(pair) = &reject.pair {
                    add_scores(&pair.scores, false);
                }
            }
        }
    }
    report.plausibility.accepted.finish();
    report.plausibility.rejected.finish();
    report.fluency.accepted.finish();
    report.fluency.rejected.finish();
}

fn write_outputs(
    out_dir: &Path,
    records: &BTreeMap<String, CaseRecord>,
    report: &QualityReport,
) -> Result<(), BenchError> {
    let out_err = |path: &Path| {
        let path = path.display().to_string();
        move |e: std::io::Error| BenchError::Output {
            path,
            message: e.to_string(),
        }
    };
    fs::create_dir_all(out_dir).map_err(out_err(out_dir))?;

    let mut pairs = String::new();
    let mut rejects = String::new();
    for record in records.values() {
        match record {
            CaseRecord::Accepted { pair } => {
                pairs.push_str(&serde_json::to_string(pair).expect("pairs serialize"));
                pairs.push('\n');
            }
            CaseRecord::Rejected { reject } => {
                rejects.push_str(&serde_json::to_string(reject).expect("rejects serialize"));
                rejects.push('\n');
            }
        }
    }
    let pairs_path = out_dir.join("pairs.jsonl");
    fs::write(&pairs_path, pairs).map_err(out_err(&pairs_path))?;
    let rejects_path = out_dir.join("rejects.jsonl");
    fs::write(&rejects_path, rejects).map_err(out_err(&rejects_path))?;

    let report_path = out_dir.join("report.json");
    let mut report_json = serde_json::to_string_pretty(report).expect("report serializes");
    report_json.push('\n');
    fs::write(&report_path, report_json).map_err(out_err(&report_path))?;

    let csv_path = out_dir.join("report.csv");
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| BenchError::Output {
        path: csv_path.display().to_string(),
        message: e.to_string(),
    };
    writer
        .write_record(["metric", "score", "accepted", "rejected"])
        .map_err(csv_err)?;
    for (metric, split) in [("plausibility", &report.plausibility), ("fluency", &report.fluency)] {
        for score in 1..=10u8 {
            let count = |stats: &ScoreStats| stats.histogram.get(&score).copied().unwrap_or(0);
            writer
                .write_record([
                    metric,
                    &score.to_string(),
                    &count(&split.accepted).to_string(),
                    &count(&split.rejected).to_string(),
                ])
                .map_err(csv_err)?;
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| BenchError::Output {
            path: csv_path.display().to_string(),
            message: e.to_string(),
        })?;
    fs::write(&csv_path, bytes).map_err(out_err(&csv_path))?;
    Ok(())
}
