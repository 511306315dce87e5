//! The typed tri-partite evidence graph.
//!
//! Three node populations — patient observations, knowledge statements, and
//! shadow placeholders for *expected but missing* evidence — are linked by
//! five edge relations:
//!
//! | relation   | endpoints              | meaning                                    |
//! |------------|------------------------|--------------------------------------------|
//! | `matching` | patient → knowledge    | observation agrees with the expectation    |
//! | `conflict` | patient → knowledge    | observation contradicts the expectation    |
//! | `support`  | knowledge → disease    | statement argues for the candidate         |
//! | `rule_out` | knowledge → disease    | statement argues against the candidate     |
//! | `penalty`  | shadow → disease       | expected evidence was never found          |
//!
//! Candidate diseases are referenced by their label; labels double as node
//! ids for edge endpoints. Graphs serialize to JSON with raw texts only —
//! embeddings are recomputed on load so stored graphs survive embedder
//! changes (see [`CausalGraph::ensure_embeddings`]).

mod ops;

pub use ops::{
    attach_knowledge, expected_evidence, init_graph, instantiate_shadow, merge_illness_graphs,
    merge_or_prune, score, summarize,
};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder, UnitVec, NORM_TOLERANCE};
use crate::text::normalize_match;
use crate::util::short_hash;

/// Whether the patient affirmed or explicitly denied an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Present,
    Absent,
}

/// Discriminative power of a knowledge statement: a `Pivot` separates
/// candidates from each other; `General` evidence is merely compatible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeKind {
    Pivot,
    General,
}

/// Clinical weight of a knowledge statement. `Pathognomonic` and `Essential`
/// statements are *expected evidence*: their absence must be accounted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Importance {
    Pathognomonic,
    Essential,
    Typical,
    Supportive,
}

impl Importance {
    /// True for the importance levels whose absence demands re-examination.
    pub fn is_expected(self) -> bool {
        matches!(self, Importance::Pathognomonic | Importance::Essential)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRelation {
    Matching,
    Conflict,
    Support,
    RuleOut,
    Penalty,
}

/// A patient observation extracted from the narrative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientNode {
    pub id: String,
    /// Normalized clinical statement.
    pub content: String,
    /// Verbatim span from the source narrative (hallucination guard).
    pub original_text: String,
    pub status: NodeStatus,
    /// Texts absorbed from merged illness-graph nodes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    /// Unit embedding of `content`. Never serialized; recomputed on load.
    #[serde(skip)]
    pub embedding: Option<UnitVec>,
}

impl PatientNode {
    /// Builds a node with a content-derived id (stable across runs; equal
    /// normalized contents collide on purpose so duplicates are visible).
    pub fn new(content: impl Into<String>, original_text: impl Into<String>, status: NodeStatus) -> Self {
        let content = content.into();
        let id = format!("p-{}", short_hash(&format!("p|{}", normalize_match(&content))));
        PatientNode {
            id,
            content,
            original_text: original_text.into(),
            status,
            aliases: Vec::new(),
            embedding: None,
        }
    }

    /// Records an absorbed text unless it duplicates the content or an
    /// existing alias under the aggressive normal form.
    pub fn push_alias(&mut self, text: &str) {
        let normal = normalize_match(text);
        if normal.is_empty() || normal == normalize_match(&self.content) {
            return;
        }
        if self.aliases.iter().any(|a| normalize_match(a) == normal) {
            return;
        }
        self.aliases.push(text.to_string());
    }
}

/// A knowledge statement attached during reasoning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeNode {
    pub id: String,
    pub content: String,
    pub kind: KnowledgeKind,
    pub importance: Importance,
    /// Candidate labels this statement argues for (metadata as generated;
    /// the graph's support edges are authoritative for counting).
    #[serde(default)]
    pub supported_candidates: Vec<String>,
    /// Candidate labels this statement argues against.
    #[serde(default)]
    pub ruled_out_candidates: Vec<String>,
    /// Where the statement came from (fixture id, citation, URL).
    #[serde(default)]
    pub provenance: String,
}

impl KnowledgeNode {
    pub fn new(
        content: impl Into<String>,
        kind: KnowledgeKind,
        importance: Importance,
    ) -> Self {
        let content = content.into();
        let id = format!("k-{}", short_hash(&format!("k|{}", normalize_match(&content))));
        KnowledgeNode {
            id,
            content,
            kind,
            importance,
            supported_candidates: Vec::new(),
            ruled_out_candidates: Vec::new(),
            provenance: String::new(),
        }
    }
}

/// Placeholder for expected evidence that re-examination failed to recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowNode {
    pub id: String,
    /// Candidate the missing evidence was expected for.
    pub disease: String,
    /// K-node whose expectation went unmet.
    pub origin_knowledge_id: String,
    /// Content of the expectation, copied at instantiation time.
    pub expected_content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub source: String,
    pub target: String,
    pub relation: EdgeRelation,
}

impl Edge {
    pub fn new(source: impl Into<String>, target: impl Into<String>, relation: EdgeRelation) -> Self {
        Edge {
            source: source.into(),
            target: target.into(),
            relation,
        }
    }

    fn triple(&self) -> (&str, &str, EdgeRelation) {
        (&self.source, &self.target, self.relation)
    }

    /// Human-readable rendering used in error messages.
    pub fn render(&self) -> String {
        format!("{:?} {} -> {}", self.relation, self.source, self.target)
    }
}

/// Default similarity threshold for the merge-or-prune rule and for
/// knowledge-node deduplication: cosine must be *strictly* greater to merge.
pub const DEFAULT_TAU: f64 = 0.9;

/// Weights of the evidence-balance score
/// `S(d) = w_match·N_match(d) − w_conflict·N_conf(d) − w_shadow·N_shadow(d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub w_match: f64,
    pub w_conflict: f64,
    pub w_shadow: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            w_match: 1.0,
            w_conflict: 1.0,
            w_shadow: 1.0,
        }
    }
}

/// Outcome of [`merge_or_prune`]: merge onto the observation at the given
/// index, or discard the script node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeDecision {
    Merge(usize),
    Prune,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown disease: {0}")]
    UnknownDisease(String),
    #[error("unknown node id: {0}")]
    UnknownNode(String),
    #[error("duplicate node id: {0}")]
    DuplicateNode(String),
    #[error("duplicate disease label: {0}")]
    DuplicateDisease(String),
    #[error("duplicate edge {0}")]
    DuplicateEdge(String),
    #[error("invalid edge {edge}: {reason}")]
    InvalidEdge { edge: String, reason: String },
    #[error("knowledge node {0} lists a candidate as both supported and ruled out")]
    OverlappingStance(String),
    #[error("pivot knowledge node {0} takes no stance on any candidate")]
    PivotWithoutStance(String),
    #[error("pivot knowledge node {0} supports every active candidate")]
    PivotSupportsAll(String),
    #[error("knowledge node {knowledge} has no support edge to disease {disease}")]
    NotSupporting { knowledge: String, disease: String },
    #[error("shadow for (disease {disease}, origin {origin}) already exists")]
    DuplicateShadow { disease: String, origin: String },
    #[error("shadow node {0} lacks its penalty edge")]
    ShadowWithoutPenalty(String),
    #[error("similarity threshold must be within [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("score weights must be nonnegative and finite")]
    InvalidWeights,
    #[error("patient node {0} carries a non-unit embedding")]
    NotUnit(String),
    #[error("illness graph is for {expected}, incoming summary is for {got}")]
    DiseaseMismatch { expected: String, got: String },
    #[error("graph JSON: {0}")]
    Serialization(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// The evidence graph for one case (or one stored illness).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CausalGraph {
    /// Candidate disease labels, in ranked (perception) order.
    pub diseases: Vec<String>,
    pub patient_nodes: Vec<PatientNode>,
    pub knowledge_nodes: Vec<KnowledgeNode>,
    pub shadow_nodes: Vec<ShadowNode>,
    pub edges: Vec<Edge>,
}

impl CausalGraph {
    pub fn patient(&self, id: &str) -> Option<&PatientNode> {
        self.patient_nodes.iter().find(|n| n.id == id)
    }

    pub fn knowledge(&self, id: &str) -> Option<&KnowledgeNode> {
        self.knowledge_nodes.iter().find(|n| n.id == id)
    }

    pub fn shadow(&self, id: &str) -> Option<&ShadowNode> {
        self.shadow_nodes.iter().find(|n| n.id == id)
    }

    pub fn has_disease(&self, label: &str) -> bool {
        self.diseases.iter().any(|d| d == label)
    }

    /// Appends an edge unless the identical (source, target, relation)
    /// triple is already present. Returns whether the edge was added.
    pub fn push_edge_dedup(&mut self, edge: Edge) -> bool {
        if self.edges.iter().any(|e| e.triple() == edge.triple()) {
            return false;
        }
        self.edges.push(edge);
        true
    }

    /// Knowledge ids with a `support` edge to `disease`.
    pub fn supporters_of(&self, disease: &str) -> BTreeSet<&str> {
        self.edges
            .iter()
            .filter(|e| e.relation == EdgeRelation::Support && e.target == disease)
            .map(|e| e.source.as_str())
            .collect()
    }

    /// Recomputes patient-node embeddings (used after deserialization).
    pub fn ensure_embeddings(&mut self, embedder: &dyn Embedder) -> Result<(), GraphError> {
        for node in &mut self.patient_nodes {
            if node.embedding.is_none() {
                node.embedding = Some(embedder.embed(&node.content)?);
            }
        }
        Ok(())
    }

    /// Drops all embeddings (serialization-equivalent form).
    pub fn strip_embeddings(&mut self) {
        for node in &mut self.patient_nodes {
            node.embedding = None;
        }
    }

    pub fn to_json(&self) -> Result<String, GraphError> {
        serde_json::to_string_pretty(self).map_err(|e| GraphError::Serialization(e.to_string()))
    }

    pub fn from_json(json: &str) -> Result<Self, GraphError> {
        let graph: CausalGraph =
            serde_json::from_str(json).map_err(|e| GraphError::Serialization(e.to_string()))?;
        graph.validate()?;
        Ok(graph)
    }

    /// Structural integrity check. Enforced after every mutating operation:
    ///
    /// - node ids unique across all populations and disease labels;
    /// - edges joined to existing, correctly-typed endpoints, no duplicate
    ///   triples;
    /// - knowledge stance sets disjoint; pivots take a stance and (when the
    ///   graph holds two or more candidates) never support all of them;
    /// - every shadow has exactly one penalty edge, to its own disease, and
    ///   a distinct (disease, origin) pair;
    /// - patient embeddings, when present, are unit length.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut ids: BTreeSet<&str> = BTreeSet::new();
        let mut diseases: BTreeSet<&str> = BTreeSet::new();
        for d in &self.diseases {
            if !diseases.insert(d.as_str()) {
                return Err(GraphError::DuplicateDisease(d.clone()));
            }
            if !ids.insert(d.as_str()) {
                return Err(GraphError::DuplicateNode(d.clone()));
            }
        }
        let mut patients: BTreeSet<&str> = BTreeSet::new();
        for n in &self.patient_nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
            patients.insert(n.id.as_str());
            if let Some(v) = &n.embedding {
                if (v.norm() - 1.0).abs() > NORM_TOLERANCE {
                    return Err(GraphError::NotUnit(n.id.clone()));
                }
            }
        }
        let mut knowledge: BTreeSet<&str> = BTreeSet::new();
        for n in &self.knowledge_nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
            knowledge.insert(n.id.as_str());
            let supported: BTreeSet<&str> =
                n.supported_candidates.iter().map(String::as_str).collect();
            if n.ruled_out_candidates.iter().any(|r| supported.contains(r.as_str())) {
                return Err(GraphError::OverlappingStance(n.id.clone()));
            }
        }
        let mut shadows: BTreeSet<&str> = BTreeSet::new();
        let mut shadow_pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
        for n in &self.shadow_nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
            shadows.insert(n.id.as_str());
            if !diseases.contains(n.disease.as_str()) {
                return Err(GraphError::UnknownDisease(n.disease.clone()));
            }
            if !knowledge.contains(n.origin_knowledge_id.as_str()) {
                return Err(GraphError::UnknownNode(n.origin_knowledge_id.clone()));
            }
            if !shadow_pairs.insert((n.disease.as_str(), n.origin_knowledge_id.as_str())) {
                return Err(GraphError::DuplicateShadow {
                    disease: n.disease.clone(),
                    origin: n.origin_knowledge_id.clone(),
                });
            }
        }

        let mut triples: BTreeSet<(&str, &str, EdgeRelation)> = BTreeSet::new();
        let mut penalty_sources: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.edges {
            if !triples.insert((e.source.as_str(), e.target.as_str(), e.relation)) {
                return Err(GraphError::DuplicateEdge(e.render()));
            }
            let bad = |reason: &str| GraphError::InvalidEdge {
                edge: e.render(),
                reason: reason.to_string(),
            };
            match e.relation {
                EdgeRelation::Matching | EdgeRelation::Conflict => {
                    if !patients.contains(e.source.as_str()) {
                        return Err(bad("source must be a patient node"));
                    }
                    if !knowledge.contains(e.target.as_str()) {
                        return Err(bad("target must be a knowledge node"));
                    }
                }
                EdgeRelation::Support | EdgeRelation::RuleOut => {
                    if !knowledge.contains(e.source.as_str()) {
                        return Err(bad("source must be a knowledge node"));
                    }
                    if !diseases.contains(e.target.as_str()) {
                        return Err(bad("target must be a candidate disease"));
                    }
                }
                EdgeRelation::Penalty => {
                    if !shadows.contains(e.source.as_str()) {
                        return Err(bad("source must be a shadow node"));
                    }
                    if !diseases.contains(e.target.as_str()) {
                        return Err(bad("target must be a candidate disease"));
                    }
                    *penalty_sources.entry(e.source.as_str()).or_insert(0) += 1;
                }
            }
        }

        for n in &self.shadow_nodes {
            let count = penalty_sources.get(n.id.as_str()).copied().unwrap_or(0);
            if count != 1 {
                return Err(GraphError::ShadowWithoutPenalty(n.id.clone()));
            }
            if !triples.contains(&(n.id.as_str(), n.disease.as_str(), EdgeRelation::Penalty)) {
                return Err(GraphError::ShadowWithoutPenalty(n.id.clone()));
            }
        }

        // Pivot stance checks need the support/rule-out structure; metadata
        // lists may mention labels outside this graph (stored illness
        // knowledge), so stance is judged on edges.
        if self.diseases.len() >= 2 {
            for n in &self.knowledge_nodes {
                if n.kind != KnowledgeKind::Pivot {
                    continue;
                }
                let mut touched: BTreeSet<&str> = BTreeSet::new();
                let mut supported: BTreeSet<&str> = BTreeSet::new();
                for e in &self.edges {
                    if e.source == n.id
                        && matches!(e.relation, EdgeRelation::Support | EdgeRelation::RuleOut)
                    {
                        touched.insert(e.target.as_str());
                        if e.relation == EdgeRelation::Support {
                            supported.insert(e.target.as_str());
                        }
                    }
                }
                if touched.is_empty() {
                    return Err(GraphError::PivotWithoutStance(n.id.clone()));
                }
                if supported.len() == self.diseases.len() {
                    return Err(GraphError::PivotSupportsAll(n.id.clone()));
                }
            }
        }
        Ok(())
    }
}

/// A per-disease accumulation of evidence structure across solved cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllnessGraph {
    pub disease: String,
    /// Optimistic-concurrency version; storage accepts only `stored + 1`.
    pub version: u64,
    /// Number of cases merged in.
    pub case_count: u64,
    pub graph: CausalGraph,
}

impl IllnessGraph {
    /// Fresh, empty illness graph at version 0.
    pub fn new(disease: impl Into<String>) -> Self {
        let disease = disease.into();
        IllnessGraph {
            disease: disease.clone(),
            version: 0,
            case_count: 0,
            graph: CausalGraph {
                diseases: vec![disease],
                ..CausalGraph::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::MockEmbedder;

    fn two_disease_graph() -> CausalGraph {
        let p = PatientNode::new("I have tachycardia", "- I have tachycardia.", NodeStatus::Present);
        let mut k = KnowledgeNode::new(
            "Sudden onset dyspnea with tachycardia",
            KnowledgeKind::Pivot,
            Importance::Typical,
        );
        k.supported_candidates = vec!["Pulmonary Embolism".into()];
        let mut g = CausalGraph {
            diseases: vec!["Pulmonary Embolism".into(), "Spontaneous Pneumothorax".into()],
            patient_nodes: vec![p.clone()],
            knowledge_nodes: vec![k.clone()],
            shadow_nodes: vec![],
            edges: vec![],
        };
        g.push_edge_dedup(Edge::new(k.id.clone(), "Pulmonary Embolism", EdgeRelation::Support));
        g.push_edge_dedup(Edge::new(p.id, k.id, EdgeRelation::Matching));
        g
    }

    #[test]
    fn valid_graph_passes() {
        two_disease_graph().validate().unwrap();
    }

    #[test]
    fn duplicate_edge_triple_is_rejected() {
        let mut g = two_disease_graph();
        let dup = g.edges[0].clone();
        assert!(!g.push_edge_dedup(dup.clone()));
        g.edges.push(dup);
        assert!(matches!(g.validate(), Err(GraphError::DuplicateEdge { .. })));
    }

    #[test]
    fn mistyped_edge_is_rejected() {
        let mut g = two_disease_graph();
        let pid = g.patient_nodes[0].id.clone();
        g.edges.push(Edge::new(pid, "Pulmonary Embolism", EdgeRelation::Matching));
        assert!(matches!(g.validate(), Err(GraphError::InvalidEdge { .. })));
    }

    #[test]
    fn overlapping_stance_is_rejected() {
        let mut g = two_disease_graph();
        g.knowledge_nodes[0].ruled_out_candidates = vec!["Pulmonary Embolism".into()];
        assert!(matches!(g.validate(), Err(GraphError::OverlappingStance(_))));
    }

    #[test]
    fn pivot_supporting_every_candidate_is_rejected() {
        let mut g = two_disease_graph();
        let kid = g.knowledge_nodes[0].id.clone();
        g.push_edge_dedup(Edge::new(kid, "Spontaneous Pneumothorax", EdgeRelation::Support));
        assert!(matches!(g.validate(), Err(GraphError::PivotSupportsAll(_))));
    }

    #[test]
    fn pivot_without_stance_is_rejected() {
        let mut g = two_disease_graph();
        g.edges.retain(|e| e.relation != EdgeRelation::Support);
        assert!(matches!(g.validate(), Err(GraphError::PivotWithoutStance(_))));
    }

    #[test]
    fn shadow_requires_penalty_edge() {
        let mut g = two_disease_graph();
        let kid = g.knowledge_nodes[0].id.clone();
        g.shadow_nodes.push(ShadowNode {
            id: "s-deadbeef0000".into(),
            disease: "Pulmonary Embolism".into(),
            origin_knowledge_id: kid,
            expected_content: "x".into(),
        });
        assert!(matches!(g.validate(), Err(GraphError::ShadowWithoutPenalty(_))));
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let embedder = MockEmbedder::new(64, 7);
        let mut g = two_disease_graph();
        g.ensure_embeddings(&embedder).unwrap();
        let json = g.to_json().unwrap();
        let mut back = CausalGraph::from_json(&json).unwrap();
        back.ensure_embeddings(&embedder).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn alias_dedup_is_normalization_aware() {
        let mut p = PatientNode::new("shortness of breath", "x", NodeStatus::Present);
        p.push_alias("Shortness of breath!");
        assert!(p.aliases.is_empty());
        p.push_alias("Dyspnea");
        p.push_alias("dyspnea.");
        assert_eq!(p.aliases, vec!["Dyspnea".to_string()]);
    }
}
