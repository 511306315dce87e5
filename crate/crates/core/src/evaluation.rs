//! Robustness evaluation over counterfactual control/trap pairs.
//!
//! A benchmark pair carries two narratives: a control case whose correct
//! answer is `y_gt`, and a minimally edited trap case whose correct answer is
//! `y_bias`. Scoring a model on both sides of every pair separates "knows the
//! base case" from "re-reads the changed evidence instead of anchoring":
//!
//! - [`classify_outcome`] maps one pair's two predictions onto the
//!   [`PairOutcome`] partition;
//! - [`compute_metrics`] turns a set of outcomes into base accuracy,
//!   robust accuracy, and the anchoring-error rate;
//! - [`per_disease_breakdown`] regroups results by ground-truth disease for
//!   the heatmap view;
//! - [`classify_failure_mode`] triages a trapped case into blindness /
//!   underthinking / overthinking using the reasoning trace;
//! - [`emit_report`] writes `metrics.json`, `per_disease.csv`, and
//!   `failure_modes.csv` with byte-stable content.
//!
//! Everything here is pure bookkeeping over predictions someone else
//! produced; the one provider call (the failure-mode audit) degrades to
//! [`FailureMode::Unclassified`] instead of erroring.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchforge::CounterfactualPair;
use crate::providers::{GenerationRequest, Generator, PromptTemplateId};
use crate::reasoner::ReasoningTrace;
use crate::text::{normalize_label, shares_content};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no pair outcomes to aggregate")]
    EmptyInput,
    #[error("predictions file {path}: {message}")]
    Predictions { path: String, message: String },
    #[error("duplicate prediction for pair `{pair_id}`")]
    DuplicatePrediction { pair_id: String },
    #[error("no prediction for pair `{pair_id}`")]
    MissingPrediction { pair_id: String },
    #[error("writing {path}: {message}")]
    Output { path: String, message: String },
}

/// Where one pair landed. Every (control, trap) prediction combination maps
/// to exactly one variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOutcome {
    /// Control correct and trap correct: the edit was actually re-read.
    Robust,
    /// Control correct but the trap was answered with the *control's* label:
    /// the model anchored on the unchanged surface.
    Trapped,
    /// Control correct, trap wrong, but not the anchoring answer.
    OtherTrapError,
    /// Control wrong; the trap side tells us nothing about anchoring.
    BaseFail,
}

impl PairOutcome {
    pub const ALL: [PairOutcome; 4] = [
        PairOutcome::Robust,
        PairOutcome::Trapped,
        PairOutcome::OtherTrapError,
        PairOutcome::BaseFail,
    ];

    /// Stable wire name (matches the serde representation).
    pub fn name(self) -> &'static str {
        match self {
            PairOutcome::Robust => "robust",
            PairOutcome::Trapped => "trapped",
            PairOutcome::OtherTrapError => "other_trap_error",
            PairOutcome::BaseFail => "base_fail",
        }
    }
}

impl fmt::Display for PairOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Classifies one pair's predictions. Labels are compared under
/// [`normalize_label`], so case and spacing differences don't count as
/// errors.
///
/// Pre: `y_gt` and `y_bias` are distinct diseases (benchmark construction
/// guarantees it). If they ever coincide the `Robust` arm wins.
pub fn classify_outcome(
    pred_control: &str,
    pred_trap: &str,
    y_gt: &str,
    y_bias: &str,
) -> PairOutcome {
    let gt = normalize_label(y_gt);
    let bias = normalize_label(y_bias);
    debug_assert_ne!(gt, bias, "a pair's two answers must differ");
    if normalize_label(pred_control) != gt {
        return PairOutcome::BaseFail;
    }
    let trap = normalize_label(pred_trap);
    if trap == bias {
        PairOutcome::Robust
    } else if trap == gt {
        PairOutcome::Trapped
    } else {
        PairOutcome::OtherTrapError
    }
}

/// Aggregate rates over a set of pair outcomes.
///
/// With `N` pairs, `R/T/O/B` the outcome counts:
///
/// - `acc_base = (R + T + O) / N` — the control side was answered correctly;
/// - `acc_rob  = R / N` — both sides were answered correctly;
/// - `r_bias   = T / (R + T + O)` — among pairs whose control side was
///   correct, the share that answered the trap with the anchoring label.
///   Absent (not zero) when no control side was correct: an all-failing
///   model is unmeasurable, not unbiased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessMetrics {
    pub n_total: u64,
    pub n_robust: u64,
    pub n_trapped: u64,
    pub n_other_trap_error: u64,
    pub n_base_fail: u64,
    pub acc_base: f64,
    pub acc_rob: f64,
    pub r_bias: Option<f64>,
}

/// Computes [`RobustnessMetrics`] from raw outcomes. Errors on an empty
/// input — every rate would be 0/0.
pub fn compute_metrics(outcomes: &[PairOutcome]) -> Result<RobustnessMetrics, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let count = |want: PairOutcome| outcomes.iter().filter(|o| **o == want).count() as u64;
    let n_robust = count(PairOutcome::Robust);
    let n_trapped = count(PairOutcome::Trapped);
    let n_other_trap_error = count(PairOutcome::OtherTrapError);
    let n_base_fail = count(PairOutcome::BaseFail);
    let n_total = outcomes.len() as u64;
    let base_correct = n_robust + n_trapped + n_other_trap_error;
    Ok(RobustnessMetrics {
        n_total,
        n_robust,
        n_trapped,
        n_other_trap_error,
        n_base_fail,
        acc_base: base_correct as f64 / n_total as f64,
        acc_rob: n_robust as f64 / n_total as f64,
        r_bias: (base_correct > 0).then(|| n_trapped as f64 / base_correct as f64),
    })
}

/// One scored pair: which disease the pair is about (its ground truth) and
/// where the model landed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: String,
    pub disease: String,
    pub outcome: PairOutcome,
}

/// Per-disease metrics row for the heatmap table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseBreakdownRow {
    pub disease: String,
    #[serde(flatten)]
    pub metrics: RobustnessMetrics,
}

/// Groups results by ground-truth disease (normalized label; the first
/// spelling seen is kept for display) and computes metrics per group.
///
/// Rows are ordered worst-first: anchoring rate descending, diseases whose
/// rate is unmeasurable last, ties broken by label. That puts the diseases a
/// model anchors on at the top of the heatmap.
pub fn per_disease_breakdown(results: &[PairResult]) -> Vec<DiseaseBreakdownRow> {
    let mut groups: BTreeMap<String, (String, Vec<PairOutcome>)> = BTreeMap::new();
    for r in results {
        let key = normalize_label(&r.disease);
        groups
            .entry(key)
            .or_insert_with(|| (r.disease.clone(), Vec::new()))
            .1
            .push(r.outcome);
    }
    let mut rows: Vec<DiseaseBreakdownRow> = groups
        .into_values()
        .map(|(disease, outcomes)| DiseaseBreakdownRow {
            disease,
            metrics: compute_metrics(&outcomes).expect("groups are non-empty by construction"),
        })
        .collect();
    rows.sort_by(|a, b| {
        match (a.metrics.r_bias, b.metrics.r_bias) {
            (Some(x), Some(y)) => y.partial_cmp(&x).expect("rates are finite"),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then_with(|| a.disease.cmp(&b.disease))
    });
    rows
}

/// Why a trapped case went wrong, following the audit taxonomy: the decisive
/// evidence was never even represented (`Blindness`), the correct answer
/// never entered the differential (`Underthinking`, anchored too early), or
/// it was considered and argued away (`Overthinking`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    Blindness,
    Underthinking,
    Overthinking,
    /// The auditing backend failed; recorded rather than guessed at.
    Unclassified,
}

impl FailureMode {
    pub fn name(self) -> &'static str {
        match self {
            FailureMode::Blindness => "blindness",
            FailureMode::Underthinking => "underthinking",
            FailureMode::Overthinking => "overthinking",
            FailureMode::Unclassified => "unclassified",
        }
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Triages one trapped case.
///
/// The blindness check is deterministic: if the decisive evidence
/// (`key_evidence`, usually the pair's trap phrase) is not mentioned by any
/// observation or attached knowledge in the trace's working set, perception
/// never saw it and no audit question is worth asking. Otherwise the
/// generator is asked to split underthinking from overthinking given the
/// first-impression candidate list; if that call fails the case is reported
/// [`FailureMode::Unclassified`] rather than guessed at.
pub fn classify_failure_mode(
    trace: &ReasoningTrace,
    key_evidence: &str,
    y_bias: &str,
    generator: &dyn Generator,
    seed: u64,
) -> FailureMode {
    let graph = trace.final_graph();
    let mentioned = trace
        .perception
        .p_obs
        .iter()
        .chain(graph.patient_nodes.iter())
        .flat_map(|p| {
            [p.content.as_str(), p.original_text.as_str()]
                .into_iter()
                .chain(p.aliases.iter().map(String::as_str))
        })
        .chain(graph.knowledge_nodes.iter().map(|k| k.content.as_str()))
        .any(|piece| shares_content(piece, key_evidence));
    if !mentioned {
        return FailureMode::Blindness;
    }
    let candidates = serde_json::to_string(&trace.perception.candidates)
        .expect("string lists serialize");
    let request = GenerationRequest::new(PromptTemplateId::FailureAudit, seed)
        .bind("key_evidence", key_evidence)
        .bind("trap_diagnosis", y_bias)
        .bind("candidates", candidates);
    match generator.generate(&request) {
        Ok(res) => match res.payload["mode"].as_str() {
            Some("underthinking") => FailureMode::Underthinking,
            Some("overthinking") => FailureMode::Overthinking,
            _ => FailureMode::Unclassified,
        },
        Err(e) => {
            log::warn!("failure audit for case `{}` failed: {e}; leaving unclassified", trace.case_id);
            FailureMode::Unclassified
        }
    }
}

/// Counts failure modes into the histogram shape [`MetricsReport`] carries.
pub fn tally_failure_modes(modes: &[FailureMode]) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for m in modes {
        *out.entry(m.name().to_string()).or_insert(0) += 1;
    }
    out
}

/// Everything one evaluated model produces: overall rates, the per-disease
/// heatmap column, and the failure-mode histogram over its trapped cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Display name of the evaluated model (the heatmap column header).
    pub model: String,
    pub overall: RobustnessMetrics,
    pub per_disease: Vec<DiseaseBreakdownRow>,
    /// Failure-mode name → count over trapped cases. Empty when no case was
    /// triaged.
    pub failure_modes: BTreeMap<String, u64>,
}

/// Builds a [`MetricsReport`] from scored pairs. Errors on empty input.
pub fn assemble_report(
    model: &str,
    results: &[PairResult],
    failure_modes: BTreeMap<String, u64>,
) -> Result<MetricsReport, EvalError> {
    let outcomes: Vec<PairOutcome> = results.iter().map(|r| r.outcome).collect();
    Ok(MetricsReport {
        model: model.to_string(),
        overall: compute_metrics(&outcomes)?,
        per_disease: per_disease_breakdown(results),
        failure_modes,
    })
}

/// One model's predictions for one pair, as produced by a diagnosis run or
/// supplied externally (one JSON object per line; see [`load_predictions`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub pair_id: String,
    pub pred_control: String,
    pub pred_trap: String,
}

/// Loads predictions from a JSONL file. Blank lines are skipped; a repeated
/// `pair_id` is an error (silently keeping either answer would hide a broken
/// producer).
pub fn load_predictions(path: &Path) -> Result<Vec<PairPrediction>, EvalError> {
    let raw = fs::read_to_string(path).map_err(|e| EvalError::Predictions {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pred: PairPrediction =
            serde_json::from_str(line).map_err(|e| EvalError::Predictions {
                path: path.display().to_string(),
                message: format!("line {}: {e}", lineno + 1),
            })?;
        if seen.insert(pred.pair_id.clone(), ()).is_some() {
            return Err(EvalError::DuplicatePrediction { pair_id: pred.pair_id });
        }
        out.push(pred);
    }
    Ok(out)
}

/// Runs the agent over both sides of every pair, producing the predictions
/// [`score_pairs`] consumes. Control and trap sides get distinct case ids
/// (`<pair_id>-control` / `<pair_id>-trap`) so their seeds decouple; results
/// are independent of pair order.
pub fn predict_pairs(
    agent: &crate::reasoner::DiagnosisAgent,
    pairs: &[CounterfactualPair],
    memory: crate::reasoner::MemoryView<'_>,
    run_seed: u64,
) -> Result<Vec<PairPrediction>, crate::reasoner::ReasonError> {
    pairs
        .iter()
        .map(|pair| {
            let control_id = format!("{}-control", pair.pair_id);
            let trap_id = format!("{}-trap", pair.pair_id);
            let control = agent.diagnose(&control_id, &pair.control, memory, &[], run_seed)?;
            let trap = agent.diagnose(&trap_id, &pair.trap, memory, &[], run_seed)?;
            Ok(PairPrediction {
                pair_id: pair.pair_id.clone(),
                pred_control: control.diagnosis().to_string(),
                pred_trap: trap.diagnosis().to_string(),
            })
        })
        .collect()
}

/// Joins benchmark pairs with model predictions and classifies each one.
/// Every pair must have a prediction; extra predictions are ignored.
pub fn score_pairs(
    pairs: &[CounterfactualPair],
    predictions: &[PairPrediction],
) -> Result<Vec<PairResult>, EvalError> {
    let by_id: BTreeMap<&str, &PairPrediction> =
        predictions.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    pairs
        .iter()
        .map(|pair| {
            let pred = by_id.get(pair.pair_id.as_str()).ok_or_else(|| {
                EvalError::MissingPrediction { pair_id: pair.pair_id.clone() }
            })?;
            Ok(PairResult {
                pair_id: pair.pair_id.clone(),
                disease: pair.y_gt.clone(),
                outcome: classify_outcome(
                    &pred.pred_control,
                    &pred.pred_trap,
                    &pair.y_gt,
                    &pair.y_bias,
                ),
            })
        })
        .collect()
}

/// Writes `metrics.json` (full precision), `per_disease.csv` (the heatmap
/// column: anchoring rate as a percentage, two decimals, empty cell when
/// unmeasurable), and `failure_modes.csv` (mode, count, share of triaged
/// cases as a percentage) under `out_dir`. Output is byte-stable for a given
/// report.
pub fn emit_report(report: &MetricsReport, out_dir: &Path) -> Result<(), EvalError> {
    let out_err = |path: &Path| {
        let path = path.display().to_string();
        move |e: std::io::Error| EvalError::Output { path: path.clone(), message: e.to_string() }
    };
    fs::create_dir_all(out_dir).map_err(out_err(out_dir))?;

    let json_path = out_dir.join("metrics.json");
    let mut body = serde_json::to_string_pretty(report).map_err(|e| EvalError::Output {
        path: json_path.display().to_string(),
        message: e.to_string(),
    })?;
    body.push('\n');
    fs::write(&json_path, body).map_err(out_err(&json_path))?;

    write_csv(&out_dir.join("per_disease.csv"), |w| {
        w.write_record(["disease", report.model.as_str()])?;
        for row in &report.per_disease {
            let cell = match row.metrics.r_bias {
                Some(r) => format!("{:.2}", r * 100.0),
                None => String::new(),
            };
            w.write_record([row.disease.as_str(), cell.as_str()])?;
        }
        Ok(())
    })?;

    write_csv(&out_dir.join("failure_modes.csv"), |w| {
        w.write_record(["mode", "count", "share_pct"])?;
        let total: u64 = report.failure_modes.values().sum();
        for (mode, count) in &report.failure_modes {
            let share = format!("{:.2}", *count as f64 / total as f64 * 100.0);
            w.write_record([mode.as_str(), &count.to_string(), &share])?;
        }
        Ok(())
    })?;
    Ok(())
}

fn write_csv(
    path: &Path,
    fill: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
) -> Result<(), EvalError> {
    let err = |message: String| EvalError::Output { path: path.display().to_string(), message };
    let mut writer = csv::Writer::from_writer(Vec::new());
    fill(&mut writer).map_err(|e| err(e.to_string()))?;
    let bytes = writer.into_inner().map_err(|e| err(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    use super::*;
    use crate::providers::fixtures::CannedResponse;
    use crate::providers::{FixtureBundle, MockGenerator};
    use crate::reasoner::{DiagnosisAgent, MemoryView};

    const CONTROL: &str = include_str!("../../../fixtures/case_100473_control.txt");

    const SP: &str = "Spontaneous Pneumothorax";
    const PE: &str = "Pulmonary Embolism";

    #[test]
    fn every_prediction_combination_lands_in_exactly_one_outcome() {
        use PairOutcome::*;
        let labels = ["Alpha", "Beta", "Gamma"];
        let expected = |pc: &str, pt: &str| -> PairOutcome {
            if pc != "Alpha" {
                BaseFail
            } else if pt == "Beta" {
                Robust
            } else if pt == "Alpha" {
                Trapped
            } else {
                OtherTrapError
            }
        };
        for pc in labels {
            for pt in labels {
                assert_eq!(
                    classify_outcome(pc, pt, "Alpha", "Beta"),
                    expected(pc, pt),
                    "control={pc} trap={pt}"
                );
            }
        }
        // Label comparison is spacing- and case-insensitive.
        assert_eq!(classify_outcome(" alpha ", "BETA", "Alpha", "Beta"), Robust);
    }

    #[test]
    fn the_four_outcome_walkthrough_matches_the_published_arithmetic() {
        // One robust, one robust, one trapped, one base failure: base
        // accuracy 3/4, robust accuracy 2/4, anchoring rate 1/3.
        let outcomes = [
            PairOutcome::Robust,
            PairOutcome::Robust,
            PairOutcome::Trapped,
            PairOutcome::BaseFail,
        ];
        let m = compute_metrics(&outcomes).unwrap();
        assert_eq!(
            (m.n_total, m.n_robust, m.n_trapped, m.n_other_trap_error, m.n_base_fail),
            (4, 2, 1, 0, 1)
        );
        assert_eq!(m.acc_base, 0.75);
        assert_eq!(m.acc_rob, 0.5);
        assert!((m.r_bias.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rates_match_a_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let n = rng.random_range(1..=40usize);
            let outcomes: Vec<PairOutcome> =
                (0..n).map(|_| *PairOutcome::ALL.choose(&mut rng).unwrap()).collect();
            let m = compute_metrics(&outcomes).unwrap();

            // Oracle: recount from the definitions, written differently.
            let total = outcomes.len() as f64;
            let base_ok =
                outcomes.iter().filter(|o| **o != PairOutcome::BaseFail).count() as f64;
            let robust = outcomes.iter().filter(|o| **o == PairOutcome::Robust).count() as f64;
            let trapped = outcomes.iter().filter(|o| **o == PairOutcome::Trapped).count() as f64;
            assert_eq!(m.acc_base, base_ok / total);
            assert_eq!(m.acc_rob, robust / total);
            match m.r_bias {
                Some(r) => assert_eq!(r, trapped / base_ok),
                None => assert_eq!(base_ok, 0.0),
            }

            // Structural invariants.
            assert!(m.acc_rob <= m.acc_base + 1e-12);
            assert_eq!(
                m.n_robust + m.n_trapped + m.n_other_trap_error + m.n_base_fail,
                m.n_total
            );
            if let Some(r) = m.r_bias {
                let sum = m.acc_rob / m.acc_base + r;
                assert!(sum <= 1.0 + 1e-9, "acc_rob/acc_base + r_bias = {sum} > 1");
                let no_other = m.n_other_trap_error == 0;
                assert_eq!((sum - 1.0).abs() < 1e-9, no_other);
            }
        }
    }

    #[test]
    fn edge_tallies_keep_the_bias_rate_honest() {
        let all_robust = vec![PairOutcome::Robust; 5];
        let m = compute_metrics(&all_robust).unwrap();
        assert_eq!((m.acc_base, m.acc_rob, m.r_bias), (1.0, 1.0, Some(0.0)));

        let all_trapped = vec![PairOutcome::Trapped; 5];
        let m = compute_metrics(&all_trapped).unwrap();
        assert_eq!((m.acc_base, m.acc_rob, m.r_bias), (1.0, 0.0, Some(1.0)));

        // A model failing every control case has no measurable anchoring
        // rate; the value must be absent, not zero.
        let all_base_fail = vec![PairOutcome::BaseFail; 5];
        let m = compute_metrics(&all_base_fail).unwrap();
        assert_eq!((m.acc_base, m.acc_rob, m.r_bias), (0.0, 0.0, None));

        assert!(matches!(compute_metrics(&[]), Err(EvalError::EmptyInput)));
    }

    fn result(pair_id: &str, disease: &str, outcome: PairOutcome) -> PairResult {
        PairResult { pair_id: pair_id.into(), disease: disease.into(), outcome }
    }

    #[test]
    fn per_disease_rows_recombine_into_the_overall_tallies() {
        use PairOutcome::*;
        let results = vec![
            result("p1", SP, Robust),
            result("p2", SP, Trapped),
            result("p3", "SPONTANEOUS pneumothorax", Trapped),
            result("p4", PE, Robust),
            result("p5", PE, Robust),
            result("p6", PE, OtherTrapError),
            result("p7", "Pericarditis", BaseFail),
        ];
        let rows = per_disease_breakdown(&results);
        assert_eq!(rows.len(), 3, "case-variant spellings fold into one row");

        // Worst-first ordering: SP anchors 2/3, PE 0/3, Pericarditis
        // unmeasurable (all base failures) so it sorts last.
        assert_eq!(rows[0].disease, SP);
        assert!((rows[0].metrics.r_bias.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rows[1].disease, PE);
        assert_eq!(rows[1].metrics.r_bias, Some(0.0));
        assert_eq!(rows[2].disease, "Pericarditis");
        assert_eq!(rows[2].metrics.r_bias, None);

        // The rows partition the input: totals and counts recombine.
        let overall =
            compute_metrics(&results.iter().map(|r| r.outcome).collect::<Vec<_>>()).unwrap();
        let sum = |f: fn(&RobustnessMetrics) -> u64| rows.iter().map(|r| f(&r.metrics)).sum::<u64>();
        assert_eq!(sum(|m| m.n_total), overall.n_total);
        assert_eq!(sum(|m| m.n_robust), overall.n_robust);
        assert_eq!(sum(|m| m.n_trapped), overall.n_trapped);
        assert_eq!(sum(|m| m.n_base_fail), overall.n_base_fail);
        let weighted: f64 = rows
            .iter()
            .map(|r| r.metrics.acc_base * r.metrics.n_total as f64)
            .sum::<f64>()
            / overall.n_total as f64;
        assert!((weighted - overall.acc_base).abs() < 1e-12);
    }

    #[test]
    fn tied_anchoring_rates_sort_by_label() {
        use PairOutcome::*;
        let results = vec![
            result("p1", "Zeta", Trapped),
            result("p2", "Alpha", Trapped),
            result("p3", "Mu", BaseFail),
            result("p4", "Kappa", BaseFail),
        ];
        let rows = per_disease_breakdown(&results);
        let labels: Vec<&str> = rows.iter().map(|r| r.disease.as_str()).collect();
        assert_eq!(labels, ["Alpha", "Zeta", "Kappa", "Mu"]);
    }

    /// The anchoring trap: the control narrative with the smoking line
    /// swapped for a DVT history. Both pivots are now present; the agent's
    /// first impression wins the resulting tie, so it keeps the control
    /// answer — a trapped case whose decisive evidence *was* represented.
    fn anchored_trap_narrative() -> String {
        let swapped = CONTROL.replace(
            "- I smoke cigarettes.",
            "- I have had a deep vein thrombosis (DVT).",
        );
        assert_ne!(swapped, CONTROL);
        swapped
    }

    #[test]
    fn failure_modes_split_blind_anchored_and_explained_away() {
        let bundle = Arc::new(FixtureBundle::builtin());
        let agent = DiagnosisAgent::mock(bundle.clone(), 7);
        let narrative = anchored_trap_narrative();
        let trace =
            agent.diagnose("fm-001", &narrative, MemoryView::default(), &[], 7).unwrap();
        assert_eq!(trace.diagnosis(), SP, "the tie must resolve toward the first impression");
        let generator = agent.generator();

        let key = "I have had a deep vein thrombosis (DVT).";

        // The DVT evidence is in the working set and the intuition listed
        // the correct answer: it was considered and argued away.
        let mode = classify_failure_mode(&trace, key, PE, generator.as_ref(), 7);
        assert_eq!(mode, FailureMode::Overthinking);

        // Same trace, but the correct answer never entered the candidate
        // list: anchored too early.
        let mut narrowed = trace.clone();
        narrowed.perception.candidates.retain(|c| normalize_label(c) != normalize_label(PE));
        let mode = classify_failure_mode(&narrowed, key, PE, generator.as_ref(), 7);
        assert_eq!(mode, FailureMode::Underthinking);

        // Evidence nothing in the trace mentions: perception was blind to
        // it, and no generator call is needed to say so.
        let unseen = "Recent long-haul flight immobilization.";
        let mode = classify_failure_mode(&trace, unseen, PE, generator.as_ref(), 7);
        assert_eq!(mode, FailureMode::Blindness);

        // Deterministic under a fixed seed.
        let again = classify_failure_mode(&trace, key, PE, generator.as_ref(), 7);
        assert_eq!(again, FailureMode::Overthinking);
    }

    #[test]
    fn a_broken_auditor_yields_unclassified() {
        let mut bundle = FixtureBundle::builtin();
        bundle.overrides.push(CannedResponse {
            template: PromptTemplateId::FailureAudit,
            match_binding: String::new(),
            contains: String::new(),
            payloads: vec![json!({"mode": "nonsense", "rationale": ""})],
        });
        let bundle = Arc::new(bundle);
        let agent = DiagnosisAgent::mock(bundle.clone(), 7);
        let trace = agent
            .diagnose("fm-002", &anchored_trap_narrative(), MemoryView::default(), &[], 7)
            .unwrap();
        let generator = MockGenerator::gateway(bundle, 7);
        let mode = classify_failure_mode(
            &trace,
            "I have had a deep vein thrombosis (DVT).",
            PE,
            &generator,
            7,
        );
        assert_eq!(mode, FailureMode::Unclassified);
    }

    fn four_pair_report() -> MetricsReport {
        use PairOutcome::*;
        let results = vec![
            result("p1", SP, Robust),
            result("p2", SP, Robust),
            result("p3", SP, Trapped),
            result("p4", PE, BaseFail),
        ];
        let modes = tally_failure_modes(&[FailureMode::Overthinking]);
        assemble_report("graph-agent", &results, modes).unwrap()
    }

    #[test]
    fn report_files_round_trip_within_tolerance() {
        let report = four_pair_report();
        assert_eq!(report.overall.acc_base, 0.75);
        assert_eq!(report.overall.acc_rob, 0.5);

        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();

        // JSON round-trips exactly.
        let raw = fs::read_to_string(dir.path().join("metrics.json")).unwrap();
        assert!(raw.ends_with('\n'));
        let parsed: MetricsReport = serde_json::from_str(&raw).unwrap();
        assert_eq!(parsed, report);

        // The heatmap CSV holds percentages rounded to two decimals; parsing
        // them back lands within half a unit in the last place.
        let csv_raw = fs::read_to_string(dir.path().join("per_disease.csv")).unwrap();
        let mut lines = csv_raw.lines();
        assert_eq!(lines.next(), Some("disease,graph-agent"));
        for (line, row) in lines.zip(&report.per_disease) {
            let (disease, cell) = line.split_once(',').unwrap();
            assert_eq!(disease, row.disease);
            match row.metrics.r_bias {
                Some(r) => {
                    let parsed: f64 = cell.parse().unwrap();
                    assert!((parsed - r * 100.0).abs() <= 0.005 + 1e-9);
                }
                None => assert!(cell.is_empty()),
            }
        }

        let modes_raw = fs::read_to_string(dir.path().join("failure_modes.csv")).unwrap();
        assert_eq!(modes_raw, "mode,count,share_pct\noverthinking,1,100.00\n");
    }

    #[test]
    fn emissions_are_byte_identical_and_survive_empty_tables() {
        let report = four_pair_report();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        emit_report(&report, a.path()).unwrap();
        emit_report(&report, b.path()).unwrap();
        for name in ["metrics.json", "per_disease.csv", "failure_modes.csv"] {
            let left = fs::read(a.path().join(name)).unwrap();
            let right = fs::read(b.path().join(name)).unwrap();
            assert_eq!(left, right, "{name} must be byte-identical across emissions");
        }

        // A report with nothing to tabulate still writes well-formed files.
        let bare = MetricsReport {
            model: "bare".into(),
            overall: compute_metrics(&[PairOutcome::Robust]).unwrap(),
            per_disease: Vec::new(),
            failure_modes: BTreeMap::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        emit_report(&bare, dir.path()).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("per_disease.csv")).unwrap(),
            "disease,bare\n"
        );
        assert_eq!(
            fs::read_to_string(dir.path().join("failure_modes.csv")).unwrap(),
            "mode,count,share_pct\n"
        );
    }

    #[test]
    fn the_fixture_pairs_walk_through_to_the_published_rates() {
        let pairs =
            crate::benchforge::load_pairs(Path::new("../../fixtures/pairs_4.jsonl")).unwrap();
        assert_eq!(pairs.len(), 4);
        for p in &pairs {
            p.check().unwrap();
        }
        let agent = DiagnosisAgent::mock(Arc::new(FixtureBundle::builtin()), 42);
        let preds = predict_pairs(&agent, &pairs, MemoryView::default(), 42).unwrap();
        let results = score_pairs(&pairs, &preds).unwrap();
        let outcomes: Vec<PairOutcome> = results.iter().map(|r| r.outcome).collect();
        assert_eq!(
            outcomes,
            [
                PairOutcome::Robust,
                PairOutcome::Robust,
                PairOutcome::Trapped,
                PairOutcome::BaseFail
            ]
        );
        let m = compute_metrics(&outcomes).unwrap();
        assert_eq!(m.acc_base, 0.75);
        assert_eq!(m.acc_rob, 0.5);
        assert!((m.r_bias.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn the_larger_fixture_set_keeps_both_diseases_measurable() {
        let pairs =
            crate::benchforge::load_pairs(Path::new("../../fixtures/pairs_20.jsonl")).unwrap();
        assert_eq!(pairs.len(), 20);
        let agent = DiagnosisAgent::mock(Arc::new(FixtureBundle::builtin()), 42);
        let preds = predict_pairs(&agent, &pairs, MemoryView::default(), 42).unwrap();
        let results = score_pairs(&pairs, &preds).unwrap();
        let m = compute_metrics(&results.iter().map(|r| r.outcome).collect::<Vec<_>>()).unwrap();
        assert_eq!(m.acc_base, 0.9);
        assert_eq!(m.acc_rob, 0.7);
        assert!((m.r_bias.unwrap() - 4.0 / 18.0).abs() < 1e-12);

        let rows = per_disease_breakdown(&results);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].disease, SP, "the anchoring-prone disease sorts first");
        assert!((rows[0].metrics.r_bias.unwrap() - 4.0 / 15.0).abs() < 1e-12);
        assert_eq!(rows[1].disease, PE);
        assert_eq!(rows[1].metrics.r_bias, Some(0.0));
    }

    #[test]
    fn prediction_files_load_score_and_reject_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"pair_id":"p1","pred_control":"Spontaneous Pneumothorax","pred_trap":"Pulmonary Embolism"}"#,
                "\n\n",
                r#"{"pair_id":"p2","pred_control":"Spontaneous Pneumothorax","pred_trap":"Spontaneous Pneumothorax"}"#,
                "\n",
            ),
        )
        .unwrap();
        let preds = load_predictions(&path).unwrap();
        assert_eq!(preds.len(), 2);

        let pair = |id: &str| CounterfactualPair {
            pair_id: id.into(),
            control: "c".into(),
            trap: "t".into(),
            y_gt: SP.into(),
            y_bias: PE.into(),
            k_gt: "c".into(),
            k_trap: "k".into(),
            votes: Vec::new(),
            scores: Vec::new(),
        };
        let results = score_pairs(&[pair("p1"), pair("p2")], &preds).unwrap();
        assert_eq!(results[0].outcome, PairOutcome::Robust);
        assert_eq!(results[0].disease, SP);
        assert_eq!(results[1].outcome, PairOutcome::Trapped);

        let err = score_pairs(&[pair("p3")], &preds).unwrap_err();
        assert!(matches!(err, EvalError::MissingPrediction { pair_id } if pair_id == "p3"));

        fs::write(
            &path,
            concat!(
                r#"{"pair_id":"p1","pred_control":"a","pred_trap":"b"}"#,
                "\n",
                r#"{"pair_id":"p1","pred_control":"a","pred_trap":"b"}"#,
                "\n",
            ),
        )
        .unwrap();
        let err = load_predictions(&path).unwrap_err();
        assert!(matches!(err, EvalError::DuplicatePrediction { pair_id } if pair_id == "p1"));
    }
}
