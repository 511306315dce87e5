//! Operations over [`CausalGraph`]s.
//!
//! Every operation is deterministic: iteration follows vector order, ties
//! break toward the lowest index or lexicographically smallest label, and
//! all similarity decisions go through [`merge_or_prune`]'s rule (strictly
//! greater than the threshold τ).

use std::collections::BTreeMap;

use crate::embed::{cosine, Embedder, UnitVec};
use crate::graph::{
    CausalGraph, Edge, EdgeRelation, GraphError, IllnessGraph, KnowledgeNode, MergeDecision,
    PatientNode, ScoreWeights,
};
use crate::util::short_hash;

/// Decides whether a stored script node merges onto one of the current
/// observations or is pruned.
///
/// Returns `Merge(i)` for the lowest-index observation attaining the maximum
/// cosine, provided that maximum is strictly greater than `tau`; otherwise
/// `Prune`. An empty observation list always prunes.
pub fn merge_or_prune(
    script: &UnitVec,
    observations: &[UnitVec],
    tau: f64,
) -> Result<MergeDecision, GraphError> {
    if !(0.0..=1.0).contains(&tau) || !tau.is_finite() {
        return Err(GraphError::InvalidTau(tau));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, obs) in observations.iter().enumerate() {
        let sim = cosine(script, obs)?;
        let better = match best {
            None => true,
            Some((_, best_sim)) => sim > best_sim,
        };
        if better {
            best = Some((i, sim));
        }
    }
    Ok(match best {
        Some((i, sim)) if sim > tau => MergeDecision::Merge(i),
        _ => MergeDecision::Prune,
    })
}

/// Content-keyed embedding memo so graph ops embed each distinct text once.
struct EmbedMemo<'a> {
    embedder: &'a dyn Embedder,
    cache: BTreeMap<String, UnitVec>,
}

impl<'a> EmbedMemo<'a> {
    fn new(embedder: &'a dyn Embedder) -> Self {
        EmbedMemo {
            embedder,
            cache: BTreeMap::new(),
        }
    }

    fn get(&mut self, text: &str) -> Result<UnitVec, GraphError> {
        if let Some(v) = self.cache.get(text) {
            return Ok(v.clone());
        }
        let v = self.embedder.embed(text)?;
        self.cache.insert(text.to_string(), v.clone());
        Ok(v)
    }
}

/// Finds the existing knowledge node most similar to `content`, if any beats
/// τ. Lowest index wins ties.
fn knowledge_merge_target(
    graph: &CausalGraph,
    content: &str,
    memo: &mut EmbedMemo,
    tau: f64,
) -> Result<Option<usize>, GraphError> {
    let incoming = memo.get(content)?;
    let existing: Vec<UnitVec> = graph
        .knowledge_nodes
        .iter()
        .map(|k| memo.get(&k.content))
        .collect::<Result<_, _>>()?;
    Ok(match merge_or_prune(&incoming, &existing, tau)? {
        MergeDecision::Merge(i) => Some(i),
        MergeDecision::Prune => None,
    })
}

/// Builds the initial case graph: ranked candidates, the perceived patient
/// observations, and — for candidates with a stored illness graph — the
/// inherited causal structure. Illness patient nodes are merged onto
/// matching observations (carrying their text as an alias, with incident
/// edges retargeted) or pruned; illness knowledge nodes are deduplicated by
/// the same cosine rule; shadow nodes never carry over.
pub fn init_graph(
    candidates: &[String],
    p_obs: &[PatientNode],
    illness_graphs: &BTreeMap<String, IllnessGraph>,
    embedder: &dyn Embedder,
    tau: f64,
) -> Result<CausalGraph, GraphError> {
    if !(0.0..=1.0).contains(&tau) || !tau.is_finite() {
        return Err(GraphError::InvalidTau(tau));
    }
    if candidates.is_empty() {
        return Err(GraphError::UnknownDisease("<empty candidate list>".into()));
    }
    let mut graph = CausalGraph {
        diseases: Vec::new(),
        ..CausalGraph::default()
    };
    for d in candidates {
        if graph.diseases.iter().any(|x| x == d) {
            return Err(GraphError::DuplicateDisease(d.clone()));
        }
        graph.diseases.push(d.clone());
    }

    let mut memo = EmbedMemo::new(embedder);
    for obs in p_obs {
        let mut node = obs.clone();
        if node.embedding.is_none() {
            node.embedding = Some(memo.get(&node.content)?);
        }
        if graph.patient_nodes.iter().any(|p| p.id == node.id) {
            return Err(GraphError::DuplicateNode(node.id));
        }
        graph.patient_nodes.push(node);
    }
    let obs_embeddings: Vec<UnitVec> = graph
        .patient_nodes
        .iter()
        .map(|p| p.embedding.clone().expect("embedded above"))
        .collect();

    for d in candidates {
        let Some(illness) = illness_graphs.get(d) else {
            continue;
        };
        if illness.disease != *d {
            return Err(GraphError::DiseaseMismatch {
                expected: d.clone(),
                got: illness.disease.clone(),
            });
        }
        // old node id -> surviving id (None = dropped).
        let mut remap: BTreeMap<String, Option<String>> = BTreeMap::new();

        for k in &illness.graph.knowledge_nodes {
            match knowledge_merge_target(&graph, &k.content, &mut memo, tau)? {
                Some(i) => {
                    remap.insert(k.id.clone(), Some(graph.knowledge_nodes[i].id.clone()));
                }
                None => {
                    if graph.knowledge_nodes.iter().any(|x| x.id == k.id) {
                        return Err(GraphError::DuplicateNode(k.id.clone()));
                    }
                    remap.insert(k.id.clone(), Some(k.id.clone()));
                    graph.knowledge_nodes.push(k.clone());
                }
            }
        }
        for p in &illness.graph.patient_nodes {
            let script = memo.get(&p.content)?;
            match merge_or_prune(&script, &obs_embeddings, tau)? {
                MergeDecision::Merge(i) => {
                    let target = &mut graph.patient_nodes[i];
                    target.push_alias(&p.content);
                    for alias in &p.aliases {
                        target.push_alias(alias);
                    }
                    remap.insert(p.id.clone(), Some(target.id.clone()));
                }
                MergeDecision::Prune => {
                    remap.insert(p.id.clone(), None);
                }
            }
        }
        for e in &illness.graph.edges {
            if e.relation == EdgeRelation::Penalty {
                continue;
            }
            let source = match remap.get(&e.source) {
                Some(Some(id)) => id.clone(),
                Some(None) => continue,
                None => e.source.clone(),
            };
            let target = match remap.get(&e.target) {
                Some(Some(id)) => id.clone(),
                Some(None) => continue,
                None => e.target.clone(),
            };
            let disease_endpoint =
                matches!(e.relation, EdgeRelation::Support | EdgeRelation::RuleOut);
            if disease_endpoint && !graph.has_disease(&target) {
                log::debug!(
                    "init_graph: dropping inherited edge to label outside the candidate set: {target}"
                );
                continue;
            }
            graph.push_edge_dedup(Edge {
                source,
                target,
                relation: e.relation,
            });
        }
    }

    graph.validate()?;
    Ok(graph)
}

/// Attaches newly distilled knowledge nodes and their typed relations.
///
/// Incoming nodes whose content embeds within τ of an existing knowledge
/// node are coalesced onto it (the existing node's fields win) and their
/// edges re-pointed. Relation edges may reference incoming node ids,
/// existing node ids, or candidate labels; duplicates (after re-pointing)
/// are dropped silently.
pub fn attach_knowledge(
    graph: &mut CausalGraph,
    k_nodes: Vec<KnowledgeNode>,
    relations: Vec<Edge>,
    embedder: &dyn Embedder,
    tau: f64,
) -> Result<(), GraphError> {
    if !(0.0..=1.0).contains(&tau) || !tau.is_finite() {
        return Err(GraphError::InvalidTau(tau));
    }
    let mut memo = EmbedMemo::new(embedder);
    let mut remap: BTreeMap<String, String> = BTreeMap::new();

    for k in k_nodes {
        match knowledge_merge_target(graph, &k.content, &mut memo, tau)? {
            Some(i) => {
                remap.insert(k.id.clone(), graph.knowledge_nodes[i].id.clone());
            }
            None => {
                if graph.knowledge_nodes.iter().any(|x| x.id == k.id)
                    || graph.patient_nodes.iter().any(|x| x.id == k.id)
                {
                    return Err(GraphError::DuplicateNode(k.id));
                }
                remap.insert(k.id.clone(), k.id.clone());
                graph.knowledge_nodes.push(k);
            }
        }
    }

    for e in relations {
        let source = remap.get(&e.source).cloned().unwrap_or(e.source);
        let target = remap.get(&e.target).cloned().unwrap_or(e.target);
        let source_known = graph.patient(&source).is_some()
            || graph.knowledge(&source).is_some()
            || graph.has_disease(&source);
        if !source_known {
            return Err(GraphError::UnknownNode(source));
        }
        let target_known = graph.patient(&target).is_some()
            || graph.knowledge(&target).is_some()
            || graph.has_disease(&target);
        if !target_known {
            return Err(GraphError::UnknownNode(target));
        }
        graph.push_edge_dedup(Edge {
            source,
            target,
            relation: e.relation,
        });
    }

    graph.validate()?;
    Ok(())
}

/// Knowledge nodes whose absence must be explained for `disease`: supporters
/// (by edge) with `Pathognomonic` or `Essential` importance, ordered by id.
pub fn expected_evidence<'g>(
    graph: &'g CausalGraph,
    disease: &str,
) -> Result<Vec<&'g KnowledgeNode>, GraphError> {
    if !graph.has_disease(disease) {
        return Err(GraphError::UnknownDisease(disease.to_string()));
    }
    let supporters = graph.supporters_of(disease);
    let mut expected: Vec<&KnowledgeNode> = graph
        .knowledge_nodes
        .iter()
        .filter(|k| supporters.contains(k.id.as_str()) && k.importance.is_expected())
        .collect();
    expected.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(expected)
}

/// Materializes missing expected evidence as a shadow node plus its penalty
/// edge. The origin must support `disease`; each (disease, origin) pair may
/// shadow at most once.
pub fn instantiate_shadow(
    graph: &mut CausalGraph,
    disease: &str,
    knowledge_id: &str,
) -> Result<String, GraphError> {
    if !graph.has_disease(disease) {
        return Err(GraphError::UnknownDisease(disease.to_string()));
    }
    let Some(origin) = graph.knowledge(knowledge_id) else {
        return Err(GraphError::UnknownNode(knowledge_id.to_string()));
    };
    if !graph.supporters_of(disease).contains(knowledge_id) {
        return Err(GraphError::NotSupporting {
            knowledge: knowledge_id.to_string(),
            disease: disease.to_string(),
        });
    }
    if graph
        .shadow_nodes
        .iter()
        .any(|s| s.disease == disease && s.origin_knowledge_id == knowledge_id)
    {
        return Err(GraphError::DuplicateShadow {
            disease: disease.to_string(),
            origin: knowledge_id.to_string(),
        });
    }
    let id = format!("s-{}", short_hash(&format!("s|{disease}|{knowledge_id}")));
    let expected_content = origin.content.clone();
    graph.shadow_nodes.push(crate::graph::ShadowNode {
        id: id.clone(),
        disease: disease.to_string(),
        origin_knowledge_id: knowledge_id.to_string(),
        expected_content,
    });
    graph.push_edge_dedup(Edge::new(id.clone(), disease, EdgeRelation::Penalty));
    graph.validate()?;
    Ok(id)
}

/// Evidence-balance score for every candidate:
/// `S(d) = w_match·N_match(d) − w_conflict·N_conf(d) − w_shadow·N_shadow(d)`.
///
/// Matching and conflict edges count toward `d` only when their knowledge
/// endpoint *supports* `d` (rule-out links contribute nothing); shadow
/// penalties count per penalty edge into `d`.
pub fn score(
    graph: &CausalGraph,
    weights: &ScoreWeights,
) -> Result<BTreeMap<String, f64>, GraphError> {
    for w in [weights.w_match, weights.w_conflict, weights.w_shadow] {
        if !w.is_finite() || w < 0.0 {
            return Err(GraphError::InvalidWeights);
        }
    }
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for d in &graph.diseases {
        let supporters = graph.supporters_of(d);
        let mut n_match = 0usize;
        let mut n_conf = 0usize;
        let mut n_shadow = 0usize;
        for e in &graph.edges {
            match e.relation {
                EdgeRelation::Matching if supporters.contains(e.target.as_str()) => n_match += 1,
                EdgeRelation::Conflict if supporters.contains(e.target.as_str()) => n_conf += 1,
                EdgeRelation::Penalty if e.target == *d => n_shadow += 1,
                _ => {}
            }
        }
        let s = weights.w_match * n_match as f64
            - weights.w_conflict * n_conf as f64
            - weights.w_shadow * n_shadow as f64;
        scores.insert(d.clone(), s);
    }
    Ok(scores)
}

/// Splits the graph into one single-candidate subgraph per disease.
///
/// A candidate's subgraph holds the knowledge and shadow nodes wired to it
/// and the patient nodes wired to that knowledge. Knowledge nodes with no
/// disease edge at all — and patient nodes with no knowledge edge at all —
/// are unattributed and carried into every subgraph, which keeps the
/// single-candidate case an identity and makes the subgraph edge sets a
/// partition-by-union of the original edge set.
pub fn summarize(graph: &CausalGraph) -> Vec<(String, CausalGraph)> {
    use std::collections::BTreeSet;

    let mut linked_knowledge: BTreeSet<&str> = BTreeSet::new();
    let mut linked_patients: BTreeSet<&str> = BTreeSet::new();
    for e in &graph.edges {
        match e.relation {
            EdgeRelation::Support | EdgeRelation::RuleOut => {
                linked_knowledge.insert(e.source.as_str());
            }
            EdgeRelation::Matching | EdgeRelation::Conflict => {
                linked_patients.insert(e.source.as_str());
            }
            EdgeRelation::Penalty => {}
        }
    }

    let mut out = Vec::new();
    for d in &graph.diseases {
        let mut k_set: BTreeSet<&str> = BTreeSet::new();
        for e in &graph.edges {
            if matches!(e.relation, EdgeRelation::Support | EdgeRelation::RuleOut)
                && e.target == *d
            {
                k_set.insert(e.source.as_str());
            }
        }
        for k in &graph.knowledge_nodes {
            if !linked_knowledge.contains(k.id.as_str()) {
                k_set.insert(k.id.as_str());
            }
        }
        let mut p_set: BTreeSet<&str> = BTreeSet::new();
        for e in &graph.edges {
            if matches!(e.relation, EdgeRelation::Matching | EdgeRelation::Conflict)
                && k_set.contains(e.target.as_str())
            {
                p_set.insert(e.source.as_str());
            }
        }
        for p in &graph.patient_nodes {
            if !linked_patients.contains(p.id.as_str()) {
                p_set.insert(p.id.as_str());
            }
        }
        let s_set: BTreeSet<&str> = graph
            .shadow_nodes
            .iter()
            .filter(|s| s.disease == *d)
            .map(|s| s.id.as_str())
            .collect();

        let sub = CausalGraph {
            diseases: vec![d.clone()],
            patient_nodes: graph
                .patient_nodes
                .iter()
                .filter(|p| p_set.contains(p.id.as_str()))
                .cloned()
                .collect(),
            knowledge_nodes: graph
                .knowledge_nodes
                .iter()
                .filter(|k| k_set.contains(k.id.as_str()))
                .cloned()
                .collect(),
            shadow_nodes: graph
                .shadow_nodes
                .iter()
                .filter(|s| s_set.contains(s.id.as_str()))
                .cloned()
                .collect(),
            edges: graph
                .edges
                .iter()
                .filter(|e| match e.relation {
                    EdgeRelation::Matching | EdgeRelation::Conflict => {
                        p_set.contains(e.source.as_str()) && k_set.contains(e.target.as_str())
                    }
                    EdgeRelation::Support | EdgeRelation::RuleOut => {
                        k_set.contains(e.source.as_str()) && e.target == *d
                    }
                    EdgeRelation::Penalty => {
                        s_set.contains(e.source.as_str()) && e.target == *d
                    }
                })
                .cloned()
                .collect(),
        };
        out.push((d.clone(), sub));
    }
    out
}

/// Folds a solved case's single-candidate summary into the stored illness
/// graph: node-level union with cosine-τ dedup for patient and knowledge
/// nodes, edge union by (source, target, relation), shadows dropped.
/// The result carries `version + 1` and `case_count + 1`.
pub fn merge_illness_graphs(
    prev: &IllnessGraph,
    summary: &CausalGraph,
    embedder: &dyn Embedder,
    tau: f64,
) -> Result<IllnessGraph, GraphError> {
    if !(0.0..=1.0).contains(&tau) || !tau.is_finite() {
        return Err(GraphError::InvalidTau(tau));
    }
    if summary.diseases.len() != 1 || summary.diseases[0] != prev.disease {
        return Err(GraphError::DiseaseMismatch {
            expected: prev.disease.clone(),
            got: summary.diseases.first().cloned().unwrap_or_default(),
        });
    }

    let mut graph = prev.graph.clone();
    graph.strip_embeddings();
    let mut memo = EmbedMemo::new(embedder);
    let mut remap: BTreeMap<String, String> = BTreeMap::new();

    for k in &summary.knowledge_nodes {
        match knowledge_merge_target(&graph, &k.content, &mut memo, tau)? {
            Some(i) => {
                remap.insert(k.id.clone(), graph.knowledge_nodes[i].id.clone());
            }
            None => {
                if graph.knowledge_nodes.iter().any(|x| x.id == k.id) {
                    return Err(GraphError::DuplicateNode(k.id.clone()));
                }
                remap.insert(k.id.clone(), k.id.clone());
                graph.knowledge_nodes.push(k.clone());
            }
        }
    }

    let prev_patient_embeddings: Vec<UnitVec> = graph
        .patient_nodes
        .iter()
        .map(|p| memo.get(&p.content))
        .collect::<Result<_, _>>()?;
    let mut patient_embeddings = prev_patient_embeddings;
    for p in &summary.patient_nodes {
        let script = memo.get(&p.content)?;
        match merge_or_prune(&script, &patient_embeddings, tau)? {
            MergeDecision::Merge(i) => {
                let target = &mut graph.patient_nodes[i];
                target.push_alias(&p.content);
                for alias in &p.aliases {
                    target.push_alias(alias);
                }
                remap.insert(p.id.clone(), target.id.clone());
            }
            MergeDecision::Prune => {
                if graph.patient_nodes.iter().any(|x| x.id == p.id) {
                    return Err(GraphError::DuplicateNode(p.id.clone()));
                }
                let mut node = p.clone();
                node.embedding = None;
                remap.insert(p.id.clone(), p.id.clone());
                patient_embeddings.push(script);
                graph.patient_nodes.push(node);
            }
        }
    }

    for e in &summary.edges {
        if e.relation == EdgeRelation::Penalty {
            continue;
        }
        let source = remap.get(&e.source).cloned().unwrap_or_else(|| e.source.clone());
        let target = remap.get(&e.target).cloned().unwrap_or_else(|| e.target.clone());
        if matches!(e.relation, EdgeRelation::Support | EdgeRelation::RuleOut)
            && target != prev.disease
        {
            log::debug!("merge_illness_graphs: dropping edge to foreign label {target}");
            continue;
        }
        graph.push_edge_dedup(Edge {
            source,
            target,
            relation: e.relation,
        });
    }

    graph.validate()?;
    Ok(IllnessGraph {
        disease: prev.disease.clone(),
        version: prev.version + 1,
        case_count: prev.case_count + 1,
        graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{Embedder, MockEmbedder};
    use crate::graph::{Importance, KnowledgeKind, NodeStatus};

    const TAU: f64 = 0.9;

    fn embedder() -> MockEmbedder {
        MockEmbedder::new(64, 7).with_synonyms([("dyspnea", "shortness of breath")])
    }

    fn unit(parts: &[f64]) -> UnitVec {
        UnitVec::from_raw(parts.to_vec()).unwrap()
    }

    #[test]
    fn merge_picks_highest_cosine_above_tau() {
        // cos(script, obs0) = 0.8, cos(script, obs1) = 0.95.
        let script = unit(&[1.0, 0.0]);
        let observations = vec![unit(&[0.8, 0.6]), unit(&[0.95, f64::sqrt(1.0 - 0.95 * 0.95)])];
        assert_eq!(
            merge_or_prune(&script, &observations, TAU).unwrap(),
            MergeDecision::Merge(1)
        );
    }

    #[test]
    fn below_tau_prunes_and_empty_prunes() {
        let script = unit(&[1.0, 0.0]);
        assert_eq!(
            merge_or_prune(&script, &[unit(&[0.8, 0.6])], TAU).unwrap(),
            MergeDecision::Prune
        );
        assert_eq!(merge_or_prune(&script, &[], TAU).unwrap(), MergeDecision::Prune);
    }

    #[test]
    fn exact_tau_prunes_ties_take_lowest_index() {
        let script = unit(&[1.0, 0.0]);
        // cosine exactly equal to tau must NOT merge (strict inequality);
        // build the threshold from the actual computed cosine so the check
        // is exact regardless of rounding.
        let near = unit(&[TAU, f64::sqrt(1.0 - TAU * TAU)]);
        let at = crate::embed::cosine(&script, &near).unwrap();
        assert_eq!(
            merge_or_prune(&script, &[near], at).unwrap(),
            MergeDecision::Prune
        );
        // identical cosines: first index wins.
        let twin = unit(&[1.0, 0.0]);
        assert_eq!(
            merge_or_prune(&script, &[twin.clone(), twin], TAU).unwrap(),
            MergeDecision::Merge(0)
        );
    }

    #[test]
    fn invalid_tau_is_rejected() {
        let v = unit(&[1.0, 0.0]);
        assert!(matches!(
            merge_or_prune(&v, &[], 1.5),
            Err(GraphError::InvalidTau(_))
        ));
    }

    fn observation(text: &str, e: &dyn Embedder) -> PatientNode {
        let mut node = PatientNode::new(text, format!("- {text}."), NodeStatus::Present);
        node.embedding = Some(e.embed(text).unwrap());
        node
    }

    #[test]
    fn init_inherits_merges_and_prunes_illness_nodes() {
        let e = embedder();
        let obs = vec![
            observation("shortness of breath", &e),
            observation("I have tachycardia", &e),
        ];
        // Stored illness graph for PE: one patient node that should merge
        // (synonym), one that should prune, one knowledge node.
        let mut illness = IllnessGraph::new("Pulmonary Embolism");
        let ip_merge = PatientNode::new("dyspnea", "dyspnea", NodeStatus::Present);
        let ip_prune = PatientNode::new("hemoptysis", "hemoptysis", NodeStatus::Present);
        let k = KnowledgeNode::new(
            "Sudden onset dyspnea",
            KnowledgeKind::General,
            Importance::Typical,
        );
        illness.graph.patient_nodes = vec![ip_merge.clone(), ip_prune.clone()];
        illness.graph.knowledge_nodes = vec![k.clone()];
        illness.graph.edges = vec![
            Edge::new(k.id.clone(), "Pulmonary Embolism", EdgeRelation::Support),
            Edge::new(ip_merge.id.clone(), k.id.clone(), EdgeRelation::Matching),
            Edge::new(ip_prune.id.clone(), k.id.clone(), EdgeRelation::Matching),
        ];
        let mut graphs = BTreeMap::new();
        graphs.insert("Pulmonary Embolism".to_string(), illness);

        let candidates = vec![
            "Pulmonary Embolism".to_string(),
            "Spontaneous Pneumothorax".to_string(),
        ];
        let g = init_graph(&candidates, &obs, &graphs, &e, TAU).unwrap();

        assert_eq!(g.patient_nodes.len(), 2, "no illness patient node added");
        let merged = g.patient(&obs[0].id).unwrap();
        assert_eq!(merged.aliases, vec!["dyspnea".to_string()], "merged node carries both texts");
        assert_eq!(g.knowledge_nodes.len(), 1);
        // The pruned node's matching edge vanished; the merged one re-pointed.
        assert_eq!(
            g.edges
                .iter()
                .filter(|x| x.relation == EdgeRelation::Matching)
                .count(),
            1
        );
        assert!(g
            .edges
            .iter()
            .any(|x| x.relation == EdgeRelation::Matching && x.source == obs[0].id));
        g.validate().unwrap();
    }

    #[test]
    fn init_rejects_duplicate_candidates() {
        let e = embedder();
        let candidates = vec!["A".to_string(), "A".to_string()];
        assert!(matches!(
            init_graph(&candidates, &[], &BTreeMap::new(), &e, TAU),
            Err(GraphError::DuplicateDisease(_))
        ));
    }

    fn pe_pneumo_graph(e: &dyn Embedder) -> (CausalGraph, PatientNode) {
        let obs = observation("I have had a deep vein thrombosis (DVT)", e);
        let g = init_graph(
            &[
                "Pulmonary Embolism".to_string(),
                "Spontaneous Pneumothorax".to_string(),
            ],
            &[obs.clone()],
            &BTreeMap::new(),
            e,
            TAU,
        )
        .unwrap();
        (g, obs)
    }

    #[test]
    fn attach_builds_balance_sheet_edges() {
        let e = embedder();
        let (mut g, obs) = pe_pneumo_graph(&e);
        let pivot = KnowledgeNode::new(
            "History of deep vein thrombosis (DVT)",
            KnowledgeKind::Pivot,
            Importance::Essential,
        );
        let relations = vec![
            Edge::new(pivot.id.clone(), "Pulmonary Embolism", EdgeRelation::Support),
            Edge::new(pivot.id.clone(), "Spontaneous Pneumothorax", EdgeRelation::RuleOut),
            Edge::new(obs.id.clone(), pivot.id.clone(), EdgeRelation::Matching),
        ];
        attach_knowledge(&mut g, vec![pivot.clone()], relations, &e, TAU).unwrap();
        assert!(g
            .edges
            .iter()
            .any(|x| x.relation == EdgeRelation::Support && x.target == "Pulmonary Embolism"));
        assert!(g.edges.iter().any(
            |x| x.relation == EdgeRelation::RuleOut && x.target == "Spontaneous Pneumothorax"
        ));
        assert!(g
            .edges
            .iter()
            .any(|x| x.relation == EdgeRelation::Matching && x.source == obs.id));
    }

    #[test]
    fn attach_coalesces_near_duplicate_knowledge() {
        let e = embedder();
        let (mut g, _) = pe_pneumo_graph(&e);
        let a = KnowledgeNode::new("History of DVT", KnowledgeKind::General, Importance::Typical);
        attach_knowledge(
            &mut g,
            vec![a.clone()],
            vec![Edge::new(a.id.clone(), "Pulmonary Embolism", EdgeRelation::Support)],
            &e,
            TAU,
        )
        .unwrap();
        // Same content modulo case/punctuation -> cosine 1 -> coalesced.
        let b = KnowledgeNode::new("history of dvt.", KnowledgeKind::General, Importance::Typical);
        attach_knowledge(
            &mut g,
            vec![b.clone()],
            vec![Edge::new(b.id.clone(), "Pulmonary Embolism", EdgeRelation::Support)],
            &e,
            TAU,
        )
        .unwrap();
        assert_eq!(g.knowledge_nodes.len(), 1);
        assert_eq!(
            g.edges
                .iter()
                .filter(|x| x.relation == EdgeRelation::Support)
                .count(),
            1,
            "re-pointed edge deduplicates"
        );
    }

    #[test]
    fn attach_rejects_unknown_endpoints() {
        let e = embedder();
        let (mut g, _) = pe_pneumo_graph(&e);
        let k = KnowledgeNode::new("Some finding", KnowledgeKind::General, Importance::Typical);
        let bad = Edge::new(k.id.clone(), "Tuberculosis", EdgeRelation::Support);
        assert!(matches!(
            attach_knowledge(&mut g, vec![k], vec![bad], &e, TAU),
            Err(GraphError::UnknownNode(_))
        ));
    }

    #[test]
    fn expected_evidence_filters_by_importance_and_orders_by_id() {
        let e = embedder();
        let (mut g, _) = pe_pneumo_graph(&e);
        let mut nodes = Vec::new();
        for (content, importance) in [
            ("History of deep vein thrombosis", Importance::Essential),
            ("Sudden onset dyspnea", Importance::Typical),
            ("Imaging-confirmed filling defect", Importance::Pathognomonic),
        ] {
            let k = KnowledgeNode::new(content, KnowledgeKind::General, importance);
            nodes.push(k);
        }
        let relations: Vec<Edge> = nodes
            .iter()
            .map(|k| Edge::new(k.id.clone(), "Pulmonary Embolism", EdgeRelation::Support))
            .collect();
        attach_knowledge(&mut g, nodes.clone(), relations, &e, TAU).unwrap();

        let expected = expected_evidence(&g, "Pulmonary Embolism").unwrap();
        assert_eq!(expected.len(), 2);
        let mut ids: Vec<&str> = expected.iter().map(|k| k.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted, "deterministic id order");
        ids.retain(|id| nodes.iter().any(|k| k.id == *id && k.importance.is_expected()));
        assert_eq!(ids.len(), 2);
        assert!(matches!(
            expected_evidence(&g, "Tuberculosis"),
            Err(GraphError::UnknownDisease(_))
        ));
    }

    #[test]
    fn shadow_instantiation_adds_penalty_and_guards_duplicates() {
        let e = embedder();
        let (mut g, _) = pe_pneumo_graph(&e);
        let k = KnowledgeNode::new(
            "Spontaneous pneumothorax on imaging",
            KnowledgeKind::Pivot,
            Importance::Essential,
        );
        attach_knowledge(
            &mut g,
            vec![k.clone()],
            vec![Edge::new(k.id.clone(), "Spontaneous Pneumothorax", EdgeRelation::Support)],
            &e,
            TAU,
        )
        .unwrap();
        let sid = instantiate_shadow(&mut g, "Spontaneous Pneumothorax", &k.id).unwrap();
        assert_eq!(g.shadow(&sid).unwrap().expected_content, k.content);
        assert!(g.edges.iter().any(|x| x.relation == EdgeRelation::Penalty
            && x.source == sid
            && x.target == "Spontaneous Pneumothorax"));
        assert!(matches!(
            instantiate_shadow(&mut g, "Spontaneous Pneumothorax", &k.id),
            Err(GraphError::DuplicateShadow { .. })
        ));
        assert!(matches!(
            instantiate_shadow(&mut g, "Pulmonary Embolism", &k.id),
            Err(GraphError::NotSupporting { .. })
        ));
    }

    /// Encodes the worked two-candidate balance sheet: four matched
    /// supporters for the embolism, and for the pneumothorax two matches,
    /// one missing essential pivot (shadow), plus a matched rule-out pivot.
    fn balance_sheet_graph(e: &dyn Embedder) -> CausalGraph {
        let obs = vec![
            observation("I have had a deep vein thrombosis (DVT)", e),
            observation("I have tachycardia", e),
            observation("pain increased when I breathe in deeply", e),
            observation("shortness of breath", e),
            observation("family members have had a pneumothorax", e),
        ];
        let mut g = init_graph(
            &[
                "Pulmonary Embolism".to_string(),
                "Spontaneous Pneumothorax".to_string(),
            ],
            &obs,
            &BTreeMap::new(),
            e,
            TAU,
        )
        .unwrap();

        let mk = |content: &str, kind, importance| KnowledgeNode::new(content, kind, importance);
        let dvt = mk("History of deep vein thrombosis (DVT)", KnowledgeKind::Pivot, Importance::Essential);
        let tachy = mk("Sudden onset dyspnea with tachycardia and hypoxia", KnowledgeKind::Pivot, Importance::Typical);
        let pleuritic = mk("Sharp pleuritic chest pain exacerbated by inspiration", KnowledgeKind::Pivot, Importance::Typical);
        let dysp = mk("Dyspnea with sudden onset", KnowledgeKind::General, Importance::Supportive);
        let imaging = mk("Spontaneous pneumothorax on imaging", KnowledgeKind::Pivot, Importance::Essential);
        let family = mk("History of spontaneous pneumothorax and family history", KnowledgeKind::General, Importance::Typical);
        let acute = mk("Acute onset pleuritic chest pain", KnowledgeKind::Pivot, Importance::Typical);

        let pe = "Pulmonary Embolism";
        let sp = "Spontaneous Pneumothorax";
        let relations = vec![
            Edge::new(dvt.id.clone(), pe, EdgeRelation::Support),
            Edge::new(dvt.id.clone(), sp, EdgeRelation::RuleOut),
            Edge::new(tachy.id.clone(), pe, EdgeRelation::Support),
            Edge::new(pleuritic.id.clone(), pe, EdgeRelation::Support),
            Edge::new(dysp.id.clone(), pe, EdgeRelation::Support),
            Edge::new(imaging.id.clone(), sp, EdgeRelation::Support),
            Edge::new(family.id.clone(), sp, EdgeRelation::Support),
            Edge::new(acute.id.clone(), sp, EdgeRelation::Support),
            Edge::new(obs[0].id.clone(), dvt.id.clone(), EdgeRelation::Matching),
            Edge::new(obs[1].id.clone(), tachy.id.clone(), EdgeRelation::Matching),
            Edge::new(obs[2].id.clone(), pleuritic.id.clone(), EdgeRelation::Matching),
            Edge::new(obs[3].id.clone(), dysp.id.clone(), EdgeRelation::Matching),
            Edge::new(obs[4].id.clone(), family.id.clone(), EdgeRelation::Matching),
            Edge::new(obs[2].id.clone(), acute.id.clone(), EdgeRelation::Matching),
        ];
        let imaging_id = imaging.id.clone();
        attach_knowledge(
            &mut g,
            vec![dvt, tachy, pleuritic, dysp, imaging, family, acute],
            relations,
            e,
            TAU,
        )
        .unwrap();
        instantiate_shadow(&mut g, sp, &imaging_id).unwrap();
        g
    }

    #[test]
    fn score_reproduces_the_worked_balance_sheet() {
        let e = embedder();
        let g = balance_sheet_graph(&e);
        let scores = score(&g, &ScoreWeights::default()).unwrap();
        let s_pe = scores["Pulmonary Embolism"];
        let s_sp = scores["Spontaneous Pneumothorax"];
        assert_eq!(s_pe, 4.0, "four matched supporters, no conflicts, no shadows");
        assert_eq!(s_sp, 1.0, "two matches minus one shadow; rule-out match counts zero");
        assert!(s_pe > s_sp);
    }

    #[test]
    fn score_weights_scale_components() {
        let e = embedder();
        let g = balance_sheet_graph(&e);
        let w = ScoreWeights {
            w_match: 2.0,
            w_conflict: 1.0,
            w_shadow: 0.5,
        };
        let scores = score(&g, &w).unwrap();
        assert_eq!(scores["Pulmonary Embolism"], 8.0);
        assert_eq!(scores["Spontaneous Pneumothorax"], 3.5);
        assert!(matches!(
            score(&g, &ScoreWeights { w_match: -1.0, ..Default::default() }),
            Err(GraphError::InvalidWeights)
        ));
    }

    #[test]
    fn summarize_partitions_edges_and_keeps_identity() {
        let e = embedder();
        let g = balance_sheet_graph(&e);
        let subs = summarize(&g);
        assert_eq!(subs.len(), 2);
        // Union of subgraph edge sets == original edge set.
        let mut union: std::collections::BTreeSet<(String, String, EdgeRelation)> =
            Default::default();
        for (_, sub) in &subs {
            sub.validate().unwrap();
            for edge in &sub.edges {
                union.insert((edge.source.clone(), edge.target.clone(), edge.relation));
            }
        }
        let original: std::collections::BTreeSet<(String, String, EdgeRelation)> = g
            .edges
            .iter()
            .map(|edge| (edge.source.clone(), edge.target.clone(), edge.relation))
            .collect();
        assert_eq!(union, original);
        // The shared patient node (pleuritic pain) appears in both subgraphs.
        let shared = &g.patient_nodes[2];
        assert!(subs.iter().all(|(_, sub)| sub.patient(&shared.id).is_some()));

        // Single-candidate graph: summarize is the identity.
        let (_, pe_sub) = &subs[0];
        let again = summarize(pe_sub);
        assert_eq!(again.len(), 1);
        assert_eq!(&again[0].1, pe_sub);
    }

    #[test]
    fn merge_into_empty_equals_summary_minus_shadows() {
        let e = embedder();
        let g = balance_sheet_graph(&e);
        let subs = summarize(&g);
        let (label, sp_sub) = subs
            .iter()
            .find(|(d, _)| d == "Spontaneous Pneumothorax")
            .unwrap();
        let merged = merge_illness_graphs(&IllnessGraph::new(label.clone()), sp_sub, &e, TAU).unwrap();
        assert_eq!(merged.version, 1);
        assert_eq!(merged.case_count, 1);
        assert!(merged.graph.shadow_nodes.is_empty());
        assert!(merged.graph.edges.iter().all(|x| x.relation != EdgeRelation::Penalty));
        assert_eq!(merged.graph.knowledge_nodes.len(), sp_sub.knowledge_nodes.len());
        // Patient nodes minus none (all unique): same count.
        assert_eq!(merged.graph.patient_nodes.len(), sp_sub.patient_nodes.len());
    }

    #[test]
    fn merge_unions_with_dedup() {
        let e = embedder();
        let base = IllnessGraph::new("Pulmonary Embolism");

        let shared = KnowledgeNode::new("History of DVT", KnowledgeKind::General, Importance::Typical);
        let only_a = KnowledgeNode::new("Tachycardia at rest", KnowledgeKind::General, Importance::Typical);
        let only_b = KnowledgeNode::new("Pleuritic chest pain", KnowledgeKind::General, Importance::Typical);

        let mut summary_a = CausalGraph {
            diseases: vec!["Pulmonary Embolism".into()],
            knowledge_nodes: vec![shared.clone(), only_a.clone()],
            ..CausalGraph::default()
        };
        summary_a.push_edge_dedup(Edge::new(shared.id.clone(), "Pulmonary Embolism", EdgeRelation::Support));
        summary_a.push_edge_dedup(Edge::new(only_a.id.clone(), "Pulmonary Embolism", EdgeRelation::Support));

        // Same shared node modulo punctuation -> must coalesce on merge.
        let shared_b = KnowledgeNode::new("history of dvt", KnowledgeKind::General, Importance::Typical);
        let mut summary_b = CausalGraph {
            diseases: vec!["Pulmonary Embolism".into()],
            knowledge_nodes: vec![shared_b.clone(), only_b.clone()],
            ..CausalGraph::default()
        };
        summary_b.push_edge_dedup(Edge::new(shared_b.id.clone(), "Pulmonary Embolism", EdgeRelation::Support));
        summary_b.push_edge_dedup(Edge::new(only_b.id.clone(), "Pulmonary Embolism", EdgeRelation::Support));

        let v1 = merge_illness_graphs(&base, &summary_a, &e, TAU).unwrap();
        let v2 = merge_illness_graphs(&v1, &summary_b, &e, TAU).unwrap();
        assert_eq!(v2.version, 2);
        assert_eq!(v2.case_count, 2);
        assert_eq!(v2.graph.knowledge_nodes.len(), 3, "shared node dedups, union keeps both uniques");
    }

    #[test]
    fn merge_rejects_foreign_summary() {
        let e = embedder();
        let base = IllnessGraph::new("Pulmonary Embolism");
        let summary = CausalGraph {
            diseases: vec!["Pericarditis".into()],
            ..CausalGraph::default()
        };
        assert!(matches!(
            merge_illness_graphs(&base, &summary, &e, TAU),
            Err(GraphError::DiseaseMismatch { .. })
        ));
    }
}
