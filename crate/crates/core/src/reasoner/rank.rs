//! Tiered candidate ranking: the audit decision procedure, codified once.
//!
//! The final audit orders candidates through three strict tiers:
//!
//! 1. **Safety sentinel** — a candidate is disqualified outright when one
//!    of its essential-or-stronger supporting findings is explicitly
//!    absent in the patient (a conflict link from an absent observation).
//! 2. **Pivot competition** — among the survivors, candidates backed by at
//!    least one *matched* pivot finding outrank candidates backed only by
//!    general features.
//! 3. **Coverage tie-break** — remaining ties order by evidence score
//!    (descending), then by the fast first-impression rank (ascending),
//!    then by label, so the full order is total and deterministic.
//!
//! If every candidate is disqualified the order falls back to the same
//! key (the tier-1 flag ties everywhere) and the outcome is flagged so
//! callers can surface the abstention.
//!
//! The deterministic mock auditor and the audit-stage fact extraction both
//! call into this module, so the decision procedure exists in exactly one
//! place.

use serde::{Deserialize, Serialize};

use crate::graph::{CausalGraph, EdgeRelation, NodeStatus, ScoreWeights};

/// Everything the tiered decision procedure is allowed to know about one
/// candidate. Serialized into the audit template's `facts` binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFacts {
    pub label: String,
    /// Evidence balance score S(d).
    pub score: f64,
    /// Position in the fast first impression (0 = top pick).
    pub intuition_rank: usize,
    /// Does some matched (present) observation instantiate a pivot finding
    /// supporting this candidate?
    pub has_matched_pivot: bool,
    /// Is some essential-or-stronger supporting finding explicitly absent?
    pub fatal_conflict: bool,
    /// Unexplained expected findings (penalty nodes) charged to this
    /// candidate.
    pub shadow_count: usize,
}

/// Result of running the tiered decision procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOutcome {
    /// Candidate labels, best first. Total order over the input.
    pub ordered: Vec<String>,
    /// Labels removed by the safety sentinel (in input order).
    pub disqualified: Vec<String>,
    /// True when the sentinel removed every candidate; the order then
    /// degrades to the coverage tie-break and callers must flag the
    /// abstention.
    pub all_disqualified: bool,
    /// Human-readable audit trail, one line per decision.
    pub tier_log: Vec<String>,
}

impl RankOutcome {
    /// The winning label, if any candidate was supplied.
    pub fn top(&self) -> Option<&str> {
        self.ordered.first().map(String::as_str)
    }
}

/// Non-NaN comparison for scores (weights and counts are finite by
/// construction; a NaN would order last).
fn score_key(s: f64) -> f64 {
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

/// Order candidates through the three tiers. The input order is irrelevant;
/// the output is a total, deterministic order.
pub fn tiered_rank(facts: &[CandidateFacts]) -> RankOutcome {
    let mut tier_log = Vec::new();
    let mut disqualified = Vec::new();
    for f in facts {
        if f.fatal_conflict {
            tier_log.push(format!(
                "tier1: disqualified `{}` — an essential supporting finding is explicitly absent",
                f.label
            ));
            disqualified.push(f.label.clone());
        }
    }
    let all_disqualified = !facts.is_empty() && disqualified.len() == facts.len();
    if all_disqualified {
        tier_log.push(
            "tier1: every candidate disqualified; falling back to coverage order".to_string(),
        );
    }

    let mut ordered: Vec<&CandidateFacts> = facts.iter().collect();
    ordered.sort_by(|a, b| {
        a.fatal_conflict
            .cmp(&b.fatal_conflict)
            .then(b.has_matched_pivot.cmp(&a.has_matched_pivot))
            .then(
                score_key(b.score)
                    .partial_cmp(&score_key(a.score))
                    .expect("score keys are never NaN"),
            )
            .then(a.intuition_rank.cmp(&b.intuition_rank))
            .then(a.label.cmp(&b.label))
    });

    if let Some(best) = ordered.first() {
        if best.has_matched_pivot && !best.fatal_conflict {
            tier_log.push(format!(
                "tier2: `{}` is backed by a matched pivot finding",
                best.label
            ));
        }
        tier_log.push(format!(
            "tier3: `{}` wins on coverage (score {:.1}, first-impression rank {})",
            best.label, best.score, best.intuition_rank
        ));
    }

    RankOutcome {
        ordered: ordered.into_iter().map(|f| f.label.clone()).collect(),
        disqualified,
        all_disqualified,
        tier_log,
    }
}

/// Extract per-candidate facts from an assembled causal graph.
///
/// `intuition` is the fast first-impression order; every graph disease must
/// appear in it (candidates are drawn from the first impression upstream).
pub fn extract_facts(graph: &CausalGraph, intuition: &[String], weights: &ScoreWeights) -> Vec<CandidateFacts> {
    let scores = crate::graph::score(graph, weights).unwrap_or_default();
    graph
        .diseases
        .iter()
        .map(|d| {
            let supporters: Vec<&str> = graph
                .edges
                .iter()
                .filter(|e| e.relation == EdgeRelation::Support && &e.target == d)
                .map(|e| e.source.as_str())
                .collect();
            let mut has_matched_pivot = false;
            let mut fatal_conflict = false;
            for k_id in &supporters {
                let Some(k) = graph.knowledge(k_id) else { continue };
                let matched = graph.edges.iter().any(|e| {
                    e.relation == EdgeRelation::Matching
                        && e.target == *k_id
                        && graph
                            .patient(&e.source)
                            .is_some_and(|p| p.status == NodeStatus::Present)
                });
                let denied = graph.edges.iter().any(|e| {
                    e.relation == EdgeRelation::Conflict
                        && e.target == *k_id
                        && graph
                            .patient(&e.source)
                            .is_some_and(|p| p.status == NodeStatus::Absent)
                });
                if matched && k.kind == crate::graph::KnowledgeKind::Pivot {
                    has_matched_pivot = true;
                }
                if denied && k.importance.is_expected() {
                    fatal_conflict = true;
                }
            }
            let shadow_count = graph
                .shadow_nodes
                .iter()
                .filter(|s| &s.disease == d)
                .count();
            CandidateFacts {
                label: d.clone(),
                score: scores.get(d).copied().unwrap_or(0.0),
                intuition_rank: intuition
                    .iter()
                    .position(|l| l == d)
                    .unwrap_or(usize::MAX),
                has_matched_pivot,
                fatal_conflict,
                shadow_count,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn facts(label: &str, score: f64, rank: usize, pivot: bool, fatal: bool) -> CandidateFacts {
        CandidateFacts {
            label: label.to_string(),
            score,
            intuition_rank: rank,
            has_matched_pivot: pivot,
            fatal_conflict: fatal,
            shadow_count: 0,
        }
    }

    #[test]
    fn disqualified_candidate_ranks_below_any_survivor() {
        let out = tiered_rank(&[
            facts("A", 10.0, 0, true, true),
            facts("B", -5.0, 1, false, false),
        ]);
        assert_eq!(out.ordered, vec!["B", "A"]);
        assert_eq!(out.disqualified, vec!["A"]);
        assert!(!out.all_disqualified);
    }

    #[test]
    fn matched_pivot_beats_higher_score_without_pivot() {
        let out = tiered_rank(&[
            facts("NoPivot", 9.0, 0, false, false),
            facts("Pivot", 1.0, 1, true, false),
        ]);
        assert_eq!(out.top(), Some("Pivot"));
    }

    #[test]
    fn score_then_intuition_then_label_break_ties() {
        let out = tiered_rank(&[
            facts("C", 2.0, 2, false, false),
            facts("B", 2.0, 1, false, false),
            facts("A", 1.0, 0, false, false),
        ]);
        assert_eq!(out.ordered, vec!["B", "C", "A"]);

        let out = tiered_rank(&[
            facts("Zeta", 2.0, 1, false, false),
            facts("Alpha", 2.0, 1, false, false),
        ]);
        assert_eq!(out.ordered, vec!["Alpha", "Zeta"]);
    }

    #[test]
    fn all_disqualified_is_flagged_and_falls_back_to_coverage() {
        let out = tiered_rank(&[
            facts("A", 1.0, 0, false, true),
            facts("B", 3.0, 1, true, true),
        ]);
        assert!(out.all_disqualified);
        assert_eq!(out.ordered, vec!["B", "A"]);
        assert_eq!(out.disqualified.len(), 2);
    }

    #[test]
    fn empty_input_yields_empty_outcome() {
        let out = tiered_rank(&[]);
        assert!(out.ordered.is_empty());
        assert!(!out.all_disqualified);
        assert_eq!(out.top(), None);
    }
}
