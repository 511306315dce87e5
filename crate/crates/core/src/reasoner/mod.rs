//! The staged diagnosis pipeline: perception → graph initialization →
//! forward evidence seeking → backward re-examination → evidence audit.
//!
//! Each stage is a method on [`DiagnosisAgent`] so they can be driven (and
//! tested) individually; [`DiagnosisAgent::diagnose`] runs the whole
//! pipeline for one case and returns a [`ReasoningTrace`] carrying the
//! artifacts of every stage — the perception, a graph snapshot after each
//! graph-mutating stage, per-candidate scores and decision facts, the
//! re-examination log, and the audited verdict.
//!
//! Any stage failure aborts with an error naming the stage; per-stage
//! progress is logged at `trace` level so a failed run still leaves its
//! partial artifacts in the log.

pub mod rank;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embed::{Embedder, MockEmbedder, DEFAULT_EMBED_DIM};
use crate::graph::{
    self, CausalGraph, Edge, EdgeRelation, GraphError, IllnessGraph, Importance, KnowledgeKind,
    KnowledgeNode, NodeStatus, PatientNode, ScoreWeights, DEFAULT_TAU,
};
use crate::memory::{ExemplarStore, MemoryError, DEFAULT_RETRIEVAL_K};
use crate::providers::{
    FixtureBundle, GenerationRequest, Generator, KnowledgePurpose, KnowledgeSource, MockGenerator,
    MockKnowledge, PromptTemplateId, ProviderError,
};
use crate::text::normalize_label;
use crate::util::case_seed;

pub use rank::{extract_facts, tiered_rank, CandidateFacts, RankOutcome};

/// Number of candidates requested from the fast first impression.
pub const DEFAULT_INTUITION_K: usize = 5;

/// A pipeline failure, tagged with the stage that raised it.
#[derive(Debug, Error)]
pub enum ReasonError {
    #[error("{stage} stage: {source}")]
    Provider {
        stage: &'static str,
        #[source]
        source: ProviderError,
    },
    #[error("{stage} stage: {source}")]
    Graph {
        stage: &'static str,
        #[source]
        source: GraphError,
    },
    #[error("{stage} stage: {source}")]
    Memory {
        stage: &'static str,
        #[source]
        source: MemoryError,
    },
    #[error("{stage} stage: payload field `{field}`: {reason}")]
    Payload {
        stage: &'static str,
        field: &'static str,
        reason: String,
    },
    #[error("perception produced no usable candidates")]
    NoCandidates,
}

fn provider_err(stage: &'static str) -> impl FnOnce(ProviderError) -> ReasonError {
    move |source| ReasonError::Provider { stage, source }
}

fn graph_err(stage: &'static str) -> impl FnOnce(GraphError) -> ReasonError {
    move |source| ReasonError::Graph { stage, source }
}

fn memory_err(stage: &'static str) -> impl FnOnce(MemoryError) -> ReasonError {
    move |source| ReasonError::Memory { stage, source }
}

/// Pulls `field` out of a generation payload and deserializes it, tagging
/// failures with the stage and field so they are diagnosable.
fn parse_field<T: serde::de::DeserializeOwned>(
    stage: &'static str,
    payload: &Value,
    field: &'static str,
) -> Result<T, ReasonError> {
    let value = payload.get(field).cloned().unwrap_or(Value::Null);
    serde_json::from_value(value).map_err(|e| ReasonError::Payload {
        stage,
        field,
        reason: e.to_string(),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("in-memory values serialize")
}

/// What the dual-pathway perception stage produced: the fast first
/// impression (ranked candidates plus rationale) and the analytic problem
/// representation (a one-liner plus structured observations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perception {
    /// Candidate labels, best first, deduplicated preserving rank.
    pub candidates: Vec<String>,
    /// Observations extracted from the narrative. Statuses follow the
    /// generator contract: `Absent` only on explicit negation.
    pub p_obs: Vec<PatientNode>,
    /// One-line problem representation; doubles as the exemplar
    /// retrieval key.
    pub one_liner: String,
    pub intuition_rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictMode {
    /// The audit kept the intuition's top pick.
    Confirm,
    /// The audit chose a different candidate than the first impression.
    Overturn,
}

/// Which of the three audit information streams carried any content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsedStreams {
    pub intuition: bool,
    pub evidence: bool,
    pub experience: bool,
}

/// Outcome of the final evidence audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub diagnosis: String,
    /// `Overturn` iff `diagnosis` differs from the intuition's top pick.
    pub mode: VerdictMode,
    pub rationale: String,
    /// Per-tier decision lines, plus any fallback or sentinel notes.
    pub tier_log: Vec<String>,
    pub used_streams: UsedStreams,
    /// True when the safety sentinel disqualified every candidate; the
    /// verdict then comes from the coverage fallback order.
    pub all_disqualified: bool,
    /// True when the auditor was unavailable or named an out-of-set label
    /// and the deterministic tiered order decided instead.
    pub degraded: bool,
}

/// One backward-pass re-examination, logged whether or not it recovered
/// anything. Shadow nodes in the final graph correspond one-to-one with
/// the `found: false` records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReexamineRecord {
    pub disease: String,
    pub knowledge_id: String,
    pub expected_content: String,
    pub found: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovered_text: Option<String>,
}

/// Complete artifact trail for one diagnosed case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub case_id: String,
    /// Per-case seed actually used (run seed mixed with the case id).
    pub seed: u64,
    pub perception: Perception,
    /// Graph as initialized: candidates, observations, and inherited
    /// illness-graph structure — no freshly distilled knowledge yet.
    pub graph_init: CausalGraph,
    /// Graph after forward knowledge attachment.
    pub graph_forward: CausalGraph,
    /// Final graph after backward re-examination, shadows included.
    pub graph_backward: CausalGraph,
    pub scores: BTreeMap<String, f64>,
    /// Per-candidate decision facts the audit ran on.
    pub facts: Vec<CandidateFacts>,
    pub reexamined: Vec<ReexamineRecord>,
    /// Case ids of the exemplars consulted by the audit.
    pub exemplar_ids: Vec<String>,
    /// Reviewer guidance active during this run (empty outside the
    /// evolution loop).
    pub critic_hints: Vec<String>,
    pub verdict: AuditVerdict,
}

impl ReasoningTrace {
    pub fn diagnosis(&self) -> &str {
        &self.verdict.diagnosis
    }

    /// The graph the verdict was computed over.
    pub fn final_graph(&self) -> &CausalGraph {
        &self.graph_backward
    }
}

/// Read-only view of evolved memory for one diagnosis run. The default is
/// the amnesic agent: no stored illness graphs and no exemplar base.
#[derive(Clone, Copy, Default)]
pub struct MemoryView<'a> {
    /// Stored illness graphs keyed by disease label.
    pub illness_graphs: Option<&'a BTreeMap<String, IllnessGraph>>,
    pub exemplars: Option<&'a ExemplarStore>,
}

/// The diagnosis pipeline, parameterized over its three gateways.
///
/// Methods take `&self`; distinct cases may be diagnosed concurrently as
/// long as the memory view is read-only for the duration.
pub struct DiagnosisAgent {
    generator: Arc<dyn Generator>,
    knowledge: Arc<dyn KnowledgeSource>,
    embedder: Arc<dyn Embedder>,
    weights: ScoreWeights,
    tau: f64,
    intuition_k: usize,
    exemplar_k: usize,
}

impl DiagnosisAgent {
    pub fn new(
        generator: Arc<dyn Generator>,
        knowledge: Arc<dyn KnowledgeSource>,
        embedder: Arc<dyn Embedder>,
    ) -> Self {
        DiagnosisAgent {
            generator,
            knowledge,
            embedder,
            weights: ScoreWeights::default(),
            tau: DEFAULT_TAU,
            intuition_k: DEFAULT_INTUITION_K,
            exemplar_k: DEFAULT_RETRIEVAL_K,
        }
    }

    /// Fully deterministic offline stack over one fixture bundle: seeded
    /// mock generator, fixture-backed knowledge, hash embedder with the
    /// bundle's synonym table.
    pub fn mock(bundle: Arc<FixtureBundle>, seed: u64) -> Self {
        let embedder =
            MockEmbedder::new(DEFAULT_EMBED_DIM, seed).with_synonyms(bundle.synonym_pairs());
        DiagnosisAgent::new(
            Arc::new(MockGenerator::gateway(bundle.clone(), seed)),
            Arc::new(MockKnowledge::new(bundle)),
            Arc::new(embedder),
        )
    }

    pub fn with_weights(mut self, weights: ScoreWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_intuition_k(mut self, k: usize) -> Self {
        self.intuition_k = k;
        self
    }

    pub fn with_exemplar_k(mut self, k: usize) -> Self {
        self.exemplar_k = k;
        self
    }

    /// The embedder this agent reasons with (memory merges must use the
    /// same one, or stored structure stops lining up).
    pub fn embedder(&self) -> Arc<dyn Embedder> {
        self.embedder.clone()
    }

    /// The generation gateway, shared with callers that need auxiliary
    /// calls (critic feedback, failure audits) consistent with this agent.
    pub fn generator(&self) -> Arc<dyn Generator> {
        self.generator.clone()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn weights(&self) -> &ScoreWeights {
        &self.weights
    }

    /// Dual-pathway perception: one generation call for the ranked first
    /// impression, one for the structured problem representation.
    ///
    /// Observations whose claimed `original_text` is not found verbatim in
    /// the narrative are dropped with a warning; duplicate observations
    /// (same normalized content) fold into one node, keeping the first
    /// span and recording later ones as aliases.
    pub fn perceive(
        &self,
        narrative: &str,
        critic_hints: &[String],
        seed: u64,
    ) -> Result<Perception, ReasonError> {
        const STAGE: &str = "perceive";
        if narrative.trim().is_empty() {
            return Err(ReasonError::Payload {
                stage: STAGE,
                field: "narrative",
                reason: "narrative is empty".into(),
            });
        }

        let mut ddx_req = GenerationRequest::new(PromptTemplateId::IntuitiveDdx, seed)
            .bind("narrative", narrative)
            .bind("k", self.intuition_k.to_string());
        if !critic_hints.is_empty() {
            ddx_req = ddx_req.bind("critic_hints", critic_hints.join("\n"));
        }
        let ddx = self.generator.generate(&ddx_req).map_err(provider_err(STAGE))?;
        let raw_candidates: Vec<String> = parse_field(STAGE, &ddx.payload, "candidates")?;
        let intuition_rationale: String = parse_field(STAGE, &ddx.payload, "rationale")?;
        let mut candidates = Vec::new();
        let mut seen = BTreeSet::new();
        for label in raw_candidates {
            if seen.insert(normalize_label(&label)) {
                candidates.push(label);
            }
        }
        if candidates.is_empty() {
            return Err(ReasonError::NoCandidates);
        }

        let mut problem_req =
            GenerationRequest::new(PromptTemplateId::PerceiveProblem, seed).bind("narrative", narrative);
        if !critic_hints.is_empty() {
            problem_req = problem_req.bind("critic_hints", critic_hints.join("\n"));
        }
        let problem = self
            .generator
            .generate(&problem_req)
            .map_err(provider_err(STAGE))?;
        let one_liner: String =
            parse_field(STAGE, &problem.payload, "problem_representation_one_liner")?;

        #[derive(Deserialize)]
        struct RawObservation {
            content: String,
            #[serde(default)]
            original_text: String,
            status: NodeStatus,
        }
        let raw_nodes: Vec<RawObservation> = parse_field(STAGE, &problem.payload, "p_nodes")?;
        let mut p_obs: Vec<PatientNode> = Vec::new();
        for raw in raw_nodes {
            if !raw.original_text.is_empty() && !narrative.contains(&raw.original_text) {
                log::warn!(
                    "perceive: dropping observation `{}` — claimed span not found verbatim in the narrative",
                    raw.content
                );
                continue;
            }
            let node = PatientNode::new(raw.content, raw.original_text, raw.status);
            match p_obs.iter_mut().find(|existing| existing.id == node.id) {
                Some(existing) => existing.push_alias(&node.original_text),
                None => p_obs.push(node),
            }
        }

        Ok(Perception {
            candidates,
            p_obs,
            one_liner,
            intuition_rationale,
        })
    }

    /// Builds the initial case graph, inheriting stored illness-graph
    /// structure for any candidate present in the memory view.
    pub fn init_graph(
        &self,
        perception: &Perception,
        memory: MemoryView<'_>,
    ) -> Result<CausalGraph, ReasonError> {
        let empty = BTreeMap::new();
        let stored = memory.illness_graphs.unwrap_or(&empty);
        graph::init_graph(
            &perception.candidates,
            &perception.p_obs,
            stored,
            self.embedder.as_ref(),
            self.tau,
        )
        .map_err(graph_err("init"))
    }

    /// Forward evidence seeking: retrieve knowledge snippets per candidate,
    /// distill them into typed knowledge nodes, classify their relations to
    /// the observations and candidates, and attach everything to the graph.
    ///
    /// A graph with no candidates is returned unchanged; a candidate with
    /// zero snippets simply keeps whatever knowledge it inherited.
    pub fn forward_reason(&self, graph: &mut CausalGraph, seed: u64) -> Result<(), ReasonError> {
        const STAGE: &str = "forward";
        if graph.diseases.is_empty() {
            return Ok(());
        }
        let candidates = graph.diseases.clone();

        let mut snippets = Vec::new();
        for candidate in &candidates {
            for purpose in [KnowledgePurpose::Discriminative, KnowledgePurpose::Typical] {
                snippets.extend(
                    self.knowledge
                        .search_knowledge(candidate, purpose)
                        .map_err(provider_err(STAGE))?,
                );
            }
        }

        let pivot_req = GenerationRequest::new(PromptTemplateId::PivotDiscovery, seed)
            .bind("candidates", to_json(&candidates))
            .bind("snippets", to_json(&snippets));
        let pivot = self
            .generator
            .generate(&pivot_req)
            .map_err(provider_err(STAGE))?;

        #[derive(Deserialize)]
        struct RawKnowledge {
            content: String,
            kind: KnowledgeKind,
            importance: Importance,
            #[serde(default)]
            supported_candidates: Vec<String>,
            #[serde(default)]
            ruled_out_candidates: Vec<String>,
            #[serde(default)]
            provenance: String,
        }
        let raw_nodes: Vec<RawKnowledge> = parse_field(STAGE, &pivot.payload, "k_nodes")?;
        let in_set = |label: &String| {
            candidates
                .iter()
                .any(|c| normalize_label(c) == normalize_label(label))
        };
        let mut incoming: Vec<KnowledgeNode> = Vec::new();
        for raw in raw_nodes {
            let mut node = KnowledgeNode::new(raw.content, raw.kind, raw.importance);
            node.supported_candidates = raw.supported_candidates.into_iter().filter(&in_set).collect();
            node.ruled_out_candidates = raw.ruled_out_candidates.into_iter().filter(&in_set).collect();
            node.provenance = raw.provenance;
            if incoming.iter().all(|k| k.id != node.id) {
                incoming.push(node);
            }
        }

        // Relations are classified over the fresh nodes *and* whatever
        // knowledge the graph inherited, so stored structure wires up to
        // this case's observations too.
        let mut k_list: Vec<(String, String)> = Vec::new();
        let mut seen_k = BTreeSet::new();
        for (id, content) in graph
            .knowledge_nodes
            .iter()
            .map(|k| (k.id.clone(), k.content.clone()))
            .chain(incoming.iter().map(|k| (k.id.clone(), k.content.clone())))
        {
            if seen_k.insert(id.clone()) {
                k_list.push((id, content));
            }
        }
        let p_payload: Vec<Value> = graph
            .patient_nodes
            .iter()
            .map(|p| serde_json::json!({ "id": p.id, "content": p.content, "status": p.status }))
            .collect();
        let k_payload: Vec<Value> = k_list
            .iter()
            .map(|(id, content)| serde_json::json!({ "id": id, "content": content }))
            .collect();

        let relation_req = GenerationRequest::new(PromptTemplateId::RelationClassify, seed)
            .bind("candidates", to_json(&candidates))
            .bind("p_nodes", Value::Array(p_payload).to_string())
            .bind("k_nodes", Value::Array(k_payload).to_string());
        let relation = self
            .generator
            .generate(&relation_req)
            .map_err(provider_err(STAGE))?;

        #[derive(Deserialize)]
        struct PatientLink {
            p_id: String,
            k_id: String,
            relation: EdgeRelation,
        }
        #[derive(Deserialize)]
        struct StanceLink {
            k_id: String,
            disease: String,
            relation: EdgeRelation,
        }
        let patient_links: Vec<PatientLink> = parse_field(STAGE, &relation.payload, "patient_links")?;
        let stance_links: Vec<StanceLink> = parse_field(STAGE, &relation.payload, "stance_links")?;

        let p_ids: BTreeSet<&str> = graph.patient_nodes.iter().map(|p| p.id.as_str()).collect();
        let k_ids: BTreeSet<&str> = k_list.iter().map(|(id, _)| id.as_str()).collect();
        let mut relations = Vec::new();
        for link in patient_links {
            if !matches!(link.relation, EdgeRelation::Matching | EdgeRelation::Conflict) {
                return Err(ReasonError::Payload {
                    stage: STAGE,
                    field: "patient_links",
                    reason: format!("`{:?}` is not a patient-to-knowledge relation", link.relation),
                });
            }
            if p_ids.contains(link.p_id.as_str()) && k_ids.contains(link.k_id.as_str()) {
                relations.push(Edge::new(link.p_id, link.k_id, link.relation));
            } else {
                log::debug!(
                    "forward: dropping relation to unknown node ({} -> {})",
                    link.p_id,
                    link.k_id
                );
            }
        }
        for link in stance_links {
            if !matches!(link.relation, EdgeRelation::Support | EdgeRelation::RuleOut) {
                return Err(ReasonError::Payload {
                    stage: STAGE,
                    field: "stance_links",
                    reason: format!("`{:?}` is not a knowledge-to-disease relation", link.relation),
                });
            }
            if k_ids.contains(link.k_id.as_str()) && graph.has_disease(&link.disease) {
                relations.push(Edge::new(link.k_id, link.disease, link.relation));
            } else {
                log::debug!(
                    "forward: dropping stance to unknown endpoint ({} -> {})",
                    link.k_id,
                    link.disease
                );
            }
        }

        graph::attach_knowledge(graph, incoming, relations, self.embedder.as_ref(), self.tau)
            .map_err(graph_err(STAGE))
    }

    /// Backward re-examination: for every candidate, every expected
    /// (essential-or-stronger) finding that no present observation matches
    /// is hunted for in the narrative one more time. A recovered mention
    /// becomes a patient node plus matching edge; a mention that turns out
    /// to be explicitly negated is left to its conflict edge (the absence
    /// is explained); anything else casts a shadow.
    pub fn backward_reason(
        &self,
        graph: &mut CausalGraph,
        narrative: &str,
        seed: u64,
    ) -> Result<Vec<ReexamineRecord>, ReasonError> {
        const STAGE: &str = "backward";
        let mut records = Vec::new();
        for disease in graph.diseases.clone() {
            let expected: Vec<(String, String)> = graph::expected_evidence(graph, &disease)
                .map_err(graph_err(STAGE))?
                .iter()
                .map(|k| (k.id.clone(), k.content.clone()))
                .collect();
            for (k_id, content) in expected {
                let matched = graph.edges.iter().any(|e| {
                    e.relation == EdgeRelation::Matching
                        && e.target == k_id
                        && graph
                            .patient(&e.source)
                            .is_some_and(|p| p.status == NodeStatus::Present)
                });
                if matched {
                    continue;
                }

                let request = GenerationRequest::new(PromptTemplateId::Reexamine, seed)
                    .bind("narrative", narrative)
                    .bind("expected_content", &content);
                let result = self
                    .generator
                    .generate(&request)
                    .map_err(provider_err(STAGE))?;
                let found: bool = parse_field(STAGE, &result.payload, "found")?;

                let mut recovered: Option<PatientNode> = None;
                if found {
                    let original_text: String =
                        parse_field(STAGE, &result.payload, "original_text")?;
                    let recovered_content: String = parse_field(STAGE, &result.payload, "content")?;
                    if narrative.contains(&original_text) {
                        recovered = Some(PatientNode::new(
                            recovered_content,
                            original_text,
                            NodeStatus::Present,
                        ));
                    } else {
                        log::warn!(
                            "backward: recovered span for `{content}` is not verbatim; treating as not found"
                        );
                    }
                }

                match recovered {
                    Some(node) => {
                        let record_text;
                        match graph.patient_nodes.iter().position(|p| p.id == node.id) {
                            Some(i) if graph.patient_nodes[i].status == NodeStatus::Present => {
                                let id = graph.patient_nodes[i].id.clone();
                                record_text = graph.patient_nodes[i].original_text.clone();
                                graph.push_edge_dedup(Edge::new(id, &k_id, EdgeRelation::Matching));
                            }
                            Some(i) => {
                                // Explicitly negated: the conflict edge from
                                // the absent observation already carries the
                                // disconfirming weight, so no shadow and no
                                // matching edge.
                                record_text = graph.patient_nodes[i].original_text.clone();
                            }
                            None => {
                                let mut node = node;
                                node.embedding = Some(
                                    self.embedder
                                        .embed(&node.content)
                                        .map_err(|e| graph_err(STAGE)(GraphError::from(e)))?,
                                );
                                let id = node.id.clone();
                                record_text = node.original_text.clone();
                                graph.patient_nodes.push(node);
                                graph.push_edge_dedup(Edge::new(id, &k_id, EdgeRelation::Matching));
                            }
                        }
                        records.push(ReexamineRecord {
                            disease: disease.clone(),
                            knowledge_id: k_id,
                            expected_content: content,
                            found: true,
                            recovered_text: Some(record_text),
                        });
                    }
                    None => {
                        if !graph
                            .shadow_nodes
                            .iter()
                            .any(|s| s.disease == disease && s.origin_knowledge_id == k_id)
                        {
                            graph::instantiate_shadow(graph, &disease, &k_id)
                                .map_err(graph_err(STAGE))?;
                        }
                        records.push(ReexamineRecord {
                            disease: disease.clone(),
                            knowledge_id: k_id,
                            expected_content: content,
                            found: false,
                            recovered_text: None,
                        });
                    }
                }
            }
        }
        Ok(records)
    }

    /// Final audit over the three streams: evidence facts, the first
    /// impression, and retrieved precedent cases.
    ///
    /// The auditor's verdict must name a live candidate; an out-of-set name
    /// or a failed generation falls back to the deterministic tiered order
    /// with the verdict flagged as degraded. A verdict contradicting the
    /// safety sentinel is kept but noted in the tier log.
    pub fn audit(
        &self,
        graph: &CausalGraph,
        perception: &Perception,
        facts: &[CandidateFacts],
        exemplars: &[String],
        critic_hints: &[String],
        seed: u64,
    ) -> Result<AuditVerdict, ReasonError> {
        const STAGE: &str = "audit";
        if facts.is_empty() {
            return Err(ReasonError::NoCandidates);
        }
        let outcome = tiered_rank(facts);
        let fallback_top = outcome
            .top()
            .map(str::to_string)
            .ok_or(ReasonError::NoCandidates)?;

        let mut request = GenerationRequest::new(PromptTemplateId::EvidenceAudit, seed)
            .bind("facts", to_json(&facts))
            .bind("intuition", to_json(&perception.candidates))
            .bind("exemplars", to_json(&exemplars));
        if !critic_hints.is_empty() {
            request = request.bind("critic_hints", critic_hints.join("\n"));
        }

        let (diagnosis, rationale, mut tier_log, degraded) = match self.generator.generate(&request)
        {
            Ok(result) => {
                let named: String = parse_field(STAGE, &result.payload, "diagnosis")?;
                let rationale: String = parse_field(STAGE, &result.payload, "rationale")?;
                let tier_log: Vec<String> = parse_field(STAGE, &result.payload, "tier_log")?;
                let canonical = graph
                    .diseases
                    .iter()
                    .find(|d| normalize_label(d) == normalize_label(&named));
                match canonical {
                    Some(label) => (label.clone(), rationale, tier_log, false),
                    None => {
                        let mut log = tier_log;
                        log.push(format!(
                            "fallback: auditor named `{named}`, which is not a live candidate; deterministic tiered order used"
                        ));
                        (fallback_top.clone(), rationale, log, true)
                    }
                }
            }
            Err(err) => {
                log::warn!("audit: auditor unavailable ({err}); using the deterministic tiered order");
                let mut log = outcome.tier_log.clone();
                log.push("fallback: auditor unavailable; deterministic tiered order used".into());
                (
                    fallback_top.clone(),
                    "deterministic tiered ranking (auditor unavailable)".to_string(),
                    log,
                    true,
                )
            }
        };

        if outcome.disqualified.iter().any(|d| d == &diagnosis) {
            tier_log.push(format!(
                "note: `{diagnosis}` was disqualified by the safety sentinel; keeping the auditor's call"
            ));
        }
        let mode = if perception.candidates.first().is_some_and(|top| *top == diagnosis) {
            VerdictMode::Confirm
        } else {
            VerdictMode::Overturn
        };
        Ok(AuditVerdict {
            diagnosis,
            mode,
            rationale,
            tier_log,
            used_streams: UsedStreams {
                intuition: !perception.candidates.is_empty(),
                evidence: !facts.is_empty(),
                experience: !exemplars.is_empty(),
            },
            all_disqualified: outcome.all_disqualified,
            degraded,
        })
    }

    /// Runs the whole pipeline for one case and assembles the trace.
    ///
    /// The effective seed mixes `run_seed` with the case id, so results are
    /// independent of the order cases are processed in.
    pub fn diagnose(
        &self,
        case_id: &str,
        narrative: &str,
        memory: MemoryView<'_>,
        critic_hints: &[String],
        run_seed: u64,
    ) -> Result<ReasoningTrace, ReasonError> {
        let seed = case_seed(run_seed, case_id);

        let perception = self.perceive(narrative, critic_hints, seed)?;
        log::trace!(
            "diagnose {case_id}: perceived {} candidates, {} observations",
            perception.candidates.len(),
            perception.p_obs.len()
        );

        let mut graph = self.init_graph(&perception, memory)?;
        let graph_init = snapshot(&graph);
        log::trace!("diagnose {case_id}: initialized graph with {} inherited knowledge nodes", graph_init.knowledge_nodes.len());

        self.forward_reason(&mut graph, seed)?;
        let graph_forward = snapshot(&graph);
        log::trace!(
            "diagnose {case_id}: forward pass attached {} knowledge nodes, {} edges",
            graph_forward.knowledge_nodes.len(),
            graph_forward.edges.len()
        );

        let reexamined = self.backward_reason(&mut graph, narrative, seed)?;
        let graph_backward = snapshot(&graph);
        log::trace!(
            "diagnose {case_id}: backward pass re-examined {} findings, cast {} shadows",
            reexamined.len(),
            graph_backward.shadow_nodes.len()
        );

        let scores = graph::score(&graph, &self.weights).map_err(graph_err("score"))?;
        let facts = extract_facts(&graph, &perception.candidates, &self.weights);

        let (exemplar_ids, exemplar_lines) = match memory.exemplars {
            Some(store) => {
                let hits = store
                    .retrieve(&perception.one_liner, self.exemplar_k)
                    .map_err(memory_err("retrieve"))?;
                (
                    hits.iter().map(|h| h.exemplar.case_id.clone()).collect(),
                    hits.iter().map(|h| h.exemplar.render()).collect(),
                )
            }
            None => (Vec::new(), Vec::new()),
        };

        let verdict = self.audit(&graph, &perception, &facts, &exemplar_lines, critic_hints, seed)?;
        log::trace!("diagnose {case_id}: verdict {} ({:?})", verdict.diagnosis, verdict.mode);

        Ok(ReasoningTrace {
            case_id: case_id.to_string(),
            seed,
            perception,
            graph_init,
            graph_forward,
            graph_backward,
            scores,
            facts,
            reexamined,
            exemplar_ids,
            critic_hints: critic_hints.to_vec(),
            verdict,
        })
    }
}

/// Serialization-equivalent copy of the working graph for the trace.
fn snapshot(graph: &CausalGraph) -> CausalGraph {
    let mut copy = graph.clone();
    copy.strip_embeddings();
    copy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::CannedResponse;
    use serde_json::json;

    const CONTROL: &str = include_str!("../../../../fixtures/case_100473_control.txt");
    const TRAP: &str = include_str!("../../../../fixtures/case_100473_trap.txt");

    const SP: &str = "Spontaneous Pneumothorax";
    const PE: &str = "Pulmonary Embolism";

    fn agent(seed: u64) -> DiagnosisAgent {
        DiagnosisAgent::mock(Arc::new(FixtureBundle::builtin()), seed)
    }

    fn shadows(trace: &ReasoningTrace) -> Vec<(String, String)> {
        trace
            .final_graph()
            .shadow_nodes
            .iter()
            .map(|s| (s.disease.clone(), s.expected_content.clone()))
            .collect()
    }

    #[test]
    fn control_case_confirms_the_leading_impression() {
        let trace = agent(11)
            .diagnose("case-100473-control", CONTROL, MemoryView::default(), &[], 11)
            .unwrap();

        assert_eq!(trace.perception.candidates[0], SP);
        assert_eq!(trace.verdict.diagnosis, SP);
        assert_eq!(trace.verdict.mode, VerdictMode::Confirm);
        assert!(!trace.verdict.degraded);
        assert!(!trace.verdict.all_disqualified);

        assert_eq!(trace.scores[SP], 4.0);
        assert_eq!(trace.scores[PE], 2.0);
        assert_eq!(trace.scores["Pericarditis"], 1.0);

        // The history of DVT is expected for PE, not in the narrative, not
        // recovered — exactly one shadow, charged to PE.
        assert_eq!(
            shadows(&trace),
            vec![(PE.to_string(), "History of deep vein thrombosis (DVT)".to_string())]
        );
        assert_eq!(trace.reexamined.len(), 1);
        assert!(!trace.reexamined[0].found);
        assert_eq!(trace.reexamined[0].disease, PE);

        // The DVT pivot still rules out pneumothorax even when unmatched.
        let graph = trace.final_graph();
        let dvt = graph
            .knowledge_nodes
            .iter()
            .find(|k| k.content.contains("deep vein thrombosis"))
            .expect("DVT pivot distilled");
        assert!(graph
            .edges
            .iter()
            .any(|e| e.relation == EdgeRelation::RuleOut && e.source == dvt.id && e.target == SP));

        assert_eq!(
            trace.verdict.used_streams,
            UsedStreams { intuition: true, evidence: true, experience: false }
        );
        // Snapshots are ordered: knowledge arrives in the forward pass,
        // shadows in the backward pass.
        assert!(trace.graph_init.knowledge_nodes.is_empty());
        assert!(!trace.graph_forward.knowledge_nodes.is_empty());
        assert!(trace.graph_forward.shadow_nodes.is_empty());
        trace.final_graph().validate().unwrap();
    }

    #[test]
    fn trap_case_overturns_to_the_evidence_backed_candidate() {
        let trace = agent(11)
            .diagnose("case-100473-trap", TRAP, MemoryView::default(), &[], 11)
            .unwrap();

        // The first impression still anchors on the original pattern…
        assert_eq!(trace.perception.candidates[0], SP);
        // …but the audit follows the evidence.
        assert_eq!(trace.verdict.diagnosis, PE);
        assert_eq!(trace.verdict.mode, VerdictMode::Overturn);

        assert_eq!(trace.scores[PE], 4.0);
        assert_eq!(trace.scores[SP], 1.0);

        // The swapped antecedent matches the DVT pivot…
        let graph = trace.final_graph();
        let dvt = graph
            .knowledge_nodes
            .iter()
            .find(|k| k.content.contains("deep vein thrombosis"))
            .unwrap();
        assert!(graph.edges.iter().any(|e| {
            e.relation == EdgeRelation::Matching
                && e.target == dvt.id
                && graph.patient(&e.source).is_some_and(|p| p.status == NodeStatus::Present)
        }));

        // …while the pneumothorax history is now missing: one shadow on SP.
        assert_eq!(
            shadows(&trace),
            vec![(SP.to_string(), "Prior episode of spontaneous pneumothorax".to_string())]
        );
        assert_eq!(trace.reexamined.len(), 1);
        assert_eq!(trace.reexamined[0].disease, SP);
        assert!(!trace.reexamined[0].found);
    }

    #[test]
    fn critic_hint_steers_both_pathways() {
        let hints = vec!["Anchoring missed the episodic pattern. prefer:Panic disorder".to_string()];
        let trace = agent(3)
            .diagnose("case-100473-trap", TRAP, MemoryView::default(), &hints, 3)
            .unwrap();

        assert_eq!(trace.perception.candidates[0], "Panic disorder");
        assert_eq!(trace.verdict.diagnosis, "Panic disorder");
        assert_eq!(trace.verdict.mode, VerdictMode::Confirm);
        assert_eq!(trace.critic_hints, hints);
        // Its essential history is nowhere in the narrative, so the hint
        // wins despite a shadow.
        assert!(shadows(&trace).iter().any(|(d, _)| d == "Panic disorder"));
    }

    #[test]
    fn explicit_negation_disqualifies_and_explains_the_absence() {
        let negated = CONTROL.replace(
            "- I have had a spontaneous pneumothorax.",
            "- I have never had a spontaneous pneumothorax.",
        );
        assert_ne!(negated, CONTROL);

        let trace = agent(11)
            .diagnose("case-100473-negated", &negated, MemoryView::default(), &[], 11)
            .unwrap();

        let sp_facts = trace.facts.iter().find(|f| f.label == SP).unwrap();
        assert!(sp_facts.fatal_conflict);
        assert_eq!(sp_facts.shadow_count, 0, "explained absence casts no shadow");
        assert_eq!(trace.verdict.diagnosis, PE);
        assert!(trace
            .verdict
            .tier_log
            .iter()
            .any(|line| line.contains("disqualified")));

        // The re-examination found the mention, saw it negated, and left
        // the conflict edge to speak for it.
        let sp_record = trace.reexamined.iter().find(|r| r.disease == SP).unwrap();
        assert!(sp_record.found);
        assert!(shadows(&trace).iter().all(|(d, _)| d != SP));
    }

    #[test]
    fn stored_illness_graph_structure_carries_into_the_case() {
        let mut stored = IllnessGraph::new(SP);
        stored.version = 1;
        stored.case_count = 1;
        let obs = PatientNode::new(
            "I have had a spontaneous pneumothorax.",
            "I have had a spontaneous pneumothorax.",
            NodeStatus::Present,
        );
        let habitus = KnowledgeNode::new(
            "Tall thin body habitus at presentation",
            KnowledgeKind::General,
            Importance::Typical,
        );
        stored.graph.edges.push(Edge::new(&obs.id, &habitus.id, EdgeRelation::Matching));
        stored.graph.edges.push(Edge::new(&habitus.id, SP, EdgeRelation::Support));
        stored.graph.patient_nodes.push(obs);
        stored.graph.knowledge_nodes.push(habitus.clone());

        let mut graphs = BTreeMap::new();
        graphs.insert(SP.to_string(), stored);
        let memory = MemoryView {
            illness_graphs: Some(&graphs),
            exemplars: None,
        };

        let trace = agent(11)
            .diagnose("case-100473-control", CONTROL, memory, &[], 11)
            .unwrap();

        // The stored observation merged onto this case's history line, so
        // the inherited matching edge now counts for SP: 4 + 1.
        assert_eq!(trace.scores[SP], 5.0);
        assert_eq!(trace.verdict.diagnosis, SP);
        let graph = trace.final_graph();
        assert!(graph.knowledge_nodes.iter().any(|k| k.id == habitus.id));
        let case_obs = PatientNode::new(
            "I have had a spontaneous pneumothorax.",
            "",
            NodeStatus::Present,
        );
        assert!(graph.edges.iter().any(|e| {
            e.relation == EdgeRelation::Matching && e.source == case_obs.id && e.target == habitus.id
        }));
        // Inherited knowledge shows up in the very first snapshot.
        assert!(trace.graph_init.knowledge_nodes.iter().any(|k| k.id == habitus.id));
    }

    #[test]
    fn fabricated_observation_spans_are_dropped() {
        let bundle = Arc::new(FixtureBundle::builtin());
        let mut inner = MockGenerator::new(bundle.clone(), 5);
        inner.push_override(CannedResponse {
            template: PromptTemplateId::PerceiveProblem,
            match_binding: "narrative".into(),
            contains: String::new(),
            payloads: vec![json!({
                "problem_representation_one_liner": "22M with pleuritic chest pain",
                "p_nodes": [
                    {
                        "content": "I have had a spontaneous pneumothorax.",
                        "original_text": "- I have had a spontaneous pneumothorax.",
                        "status": "present"
                    },
                    {
                        "content": "I collapsed at work yesterday.",
                        "original_text": "I collapsed at work yesterday.",
                        "status": "present"
                    }
                ]
            })],
        });
        let embedder =
            MockEmbedder::new(DEFAULT_EMBED_DIM, 5).with_synonyms(bundle.synonym_pairs());
        let agent = DiagnosisAgent::new(
            Arc::new(crate::providers::Gateway::new(inner)),
            Arc::new(MockKnowledge::new(bundle)),
            Arc::new(embedder),
        );

        let perception = agent.perceive(CONTROL, &[], 5).unwrap();
        assert_eq!(perception.p_obs.len(), 1);
        assert_eq!(
            perception.p_obs[0].content,
            "I have had a spontaneous pneumothorax."
        );
    }

    #[test]
    fn off_list_auditor_verdict_falls_back_to_the_tiered_order() {
        let bundle = Arc::new(FixtureBundle::builtin());
        let mut inner = MockGenerator::new(bundle.clone(), 7);
        inner.push_override(CannedResponse {
            template: PromptTemplateId::EvidenceAudit,
            match_binding: "facts".into(),
            contains: String::new(),
            payloads: vec![json!({
                "diagnosis": "Boerhaave syndrome",
                "rationale": "pattern completion, unsupported by the graph",
                "tier_log": []
            })],
        });
        let embedder =
            MockEmbedder::new(DEFAULT_EMBED_DIM, 7).with_synonyms(bundle.synonym_pairs());
        let agent = DiagnosisAgent::new(
            Arc::new(crate::providers::Gateway::new(inner)),
            Arc::new(MockKnowledge::new(bundle)),
            Arc::new(embedder),
        );

        let trace = agent
            .diagnose("case-100473-control", CONTROL, MemoryView::default(), &[], 7)
            .unwrap();
        assert_eq!(trace.verdict.diagnosis, SP, "deterministic order decides");
        assert!(trace.verdict.degraded);
        assert!(trace
            .verdict
            .tier_log
            .iter()
            .any(|line| line.contains("fallback")));
        assert_eq!(trace.verdict.mode, VerdictMode::Confirm);
    }

    #[test]
    fn traces_are_deterministic_and_round_trip_through_json() {
        let first = agent(42)
            .diagnose("case-100473-trap", TRAP, MemoryView::default(), &[], 42)
            .unwrap();
        let second = agent(42)
            .diagnose("case-100473-trap", TRAP, MemoryView::default(), &[], 42)
            .unwrap();
        assert_eq!(first, second);

        let encoded = serde_json::to_string_pretty(&first).unwrap();
        let decoded: ReasoningTrace = serde_json::from_str(&encoded).unwrap();
        assert_eq!(decoded, first);
    }
}
