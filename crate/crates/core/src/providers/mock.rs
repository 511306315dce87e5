//! Deterministic, rule-based stand-in for a hosted language model.
//!
//! Every template is answered by a small rule over the fixture bundle:
//! narratives are parsed by indentation, findings are recognized through
//! the bundle's substring patterns, the first impression is "priors plus
//! surface pattern counts" (deliberately reproducing the anchoring bias
//! the rest of the system exists to correct), and the audit applies the
//! codified tier ranking. The output is a pure function of
//! (template, bindings, generator seed, attempt), which is what makes
//! end-to-end runs byte-reproducible.
//!
//! Scripted [`CannedResponse`] overrides take precedence over the rules,
//! letting tests inject corrupt or adversarial payloads; overrides are
//! consumed one payload per retry attempt.

use std::sync::Arc;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::graph::{KnowledgeKind, NodeStatus};
use crate::providers::fixtures::{CannedResponse, FeatureFixture, FixtureBundle};
use crate::providers::templates::PromptTemplateId;
use crate::providers::{
    Gateway, GenerationRequest, GenerationResult, ProviderError, RawGenerator, TokenCounts,
};
use crate::reasoner::rank::{tiered_rank, CandidateFacts};
use crate::text::{normalize_label, normalize_match};
use crate::util::stable_u64;

/// Additive weight one matched general feature contributes to the fast
/// first impression, on top of the disease prior.
pub const INTUITION_PATTERN_WEIGHT: f64 = 0.1;

/// Boost applied when reviewer guidance explicitly prefers a label; large
/// enough to dominate any prior + pattern combination.
const HINT_BOOST: f64 = 10.0;

fn negation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(no|not|never|denies|denied|deny|without)\b").expect("static regex")
    })
}

/// One top-level narrative bullet with its children folded in.
#[derive(Debug, Clone)]
struct Block {
    content: String,
    original_text: String,
}

fn strip_bullet(line: &str) -> &str {
    let t = line.trim_start();
    let t = t.strip_prefix("- ").or_else(|| t.strip_prefix("* ")).unwrap_or(t);
    t.trim()
}

fn is_section_header(trimmed: &str) -> bool {
    // "Symptoms:", "Antecedents:", "Sex: ..", "Geographical region: .." and
    // underline rows like "---------". Bullets are never headers, even when
    // they end with a colon introducing children ("- The pain is:").
    if trimmed.is_empty() || trimmed.starts_with("- ") || trimmed.starts_with("* ") {
        return false;
    }
    if trimmed.chars().all(|c| c == '-') {
        return true;
    }
    let lower = trimmed.to_lowercase();
    lower.ends_with(':')
        || lower.starts_with("sex:")
        || lower.starts_with("age:")
        || lower.starts_with("geographical region:")
}

/// Split a narrative into observation blocks. A block is a zero-indent
/// `- ` bullet plus any indented continuation/child lines; headers and
/// blank lines terminate blocks. Narratives without any bullets degrade to
/// one block per non-header line so that free text still perceives.
fn parse_blocks(narrative: &str) -> Vec<Block> {
    #[derive(Default)]
    struct Open {
        start: usize,
        end: usize,
        parts: Vec<String>,
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut open: Option<Open> = None;
    let mut offset = 0usize;
    let close = |open: &mut Option<Open>, blocks: &mut Vec<Block>, narrative: &str| {
        if let Some(o) = open.take() {
            let content = o.parts.join(" ").split_whitespace().collect::<Vec<_>>().join(" ");
            if !content.is_empty() {
                blocks.push(Block {
                    content,
                    original_text: narrative[o.start..o.end].trim_end().to_string(),
                });
            }
        }
    };
    for line in narrative.split('\n') {
        let line_start = offset;
        offset += line.len() + 1;
        let trimmed = line.trim();
        let indent = line.len() - line.trim_start().len();
        if trimmed.is_empty() || is_section_header(trimmed) {
            close(&mut open, &mut blocks, narrative);
            continue;
        }
        let is_top_bullet = indent == 0 && (line.starts_with("- ") || line.starts_with("* "));
        if is_top_bullet {
            close(&mut open, &mut blocks, narrative);
            open = Some(Open {
                start: line_start,
                end: line_start + line.trim_end().len(),
                parts: vec![strip_bullet(line).to_string()],
            });
        } else if indent > 0 {
            if let Some(o) = open.as_mut() {
                o.parts.push(strip_bullet(line).to_string());
                o.end = line_start + line.trim_end().len();
            }
            // An indented line with no open block (malformed narrative) is
            // dropped rather than invented into an observation.
        } else {
            // Plain zero-indent text line: its own block.
            close(&mut open, &mut blocks, narrative);
            blocks.push(Block {
                content: trimmed.split_whitespace().collect::<Vec<_>>().join(" "),
                original_text: line.trim_end().to_string(),
            });
        }
    }
    close(&mut open, &mut blocks, narrative);
    blocks
}

/// Pull `prefer:<label>` directives out of reviewer guidance text.
fn hint_labels(text: &str) -> Vec<String> {
    let mut labels = Vec::new();
    for chunk in text.split("prefer:").skip(1) {
        let label = chunk
            .lines()
            .next()
            .unwrap_or("")
            .trim()
            .trim_end_matches(['.', '`', '"'])
            .trim();
        if !label.is_empty() {
            labels.push(label.to_string());
        }
    }
    labels
}

fn feature_matches(feature: &FeatureFixture, normalized_text: &str) -> bool {
    feature
        .match_patterns
        .iter()
        .any(|p| !p.trim().is_empty() && normalized_text.contains(&normalize_match(p)))
}

/// Deterministic rule-based generator over a [`FixtureBundle`].
pub struct MockGenerator {
    seed: u64,
    bundle: Arc<FixtureBundle>,
    overrides: Vec<CannedResponse>,
}

impl MockGenerator {
    pub fn new(bundle: Arc<FixtureBundle>, seed: u64) -> Self {
        let overrides = bundle.overrides.clone();
        MockGenerator {
            seed,
            bundle,
            overrides,
        }
    }

    /// Convenience: a schema-validating gateway around a fresh mock.
    pub fn gateway(bundle: Arc<FixtureBundle>, seed: u64) -> Gateway<MockGenerator> {
        Gateway::new(MockGenerator::new(bundle, seed))
    }

    /// Add a scripted override. When several overrides match a request the
    /// most recently added one wins.
    pub fn push_override(&mut self, canned: CannedResponse) {
        self.overrides.push(canned);
    }

    pub fn bundle(&self) -> &FixtureBundle {
        &self.bundle
    }

    fn find_override(&self, request: &GenerationRequest) -> Option<&CannedResponse> {
        self.overrides.iter().rev().find(|o| {
            o.template == request.template
                && !o.payloads.is_empty()
                && request.binding(&o.match_binding).contains(&o.contains)
        })
    }

    fn parse_binding<T: serde::de::DeserializeOwned>(
        request: &GenerationRequest,
        key: &str,
    ) -> Result<T, ProviderError> {
        serde_json::from_str(request.binding(key)).map_err(|e| {
            ProviderError::Config(format!(
                "mock: binding `{key}` of `{}` is not valid JSON for its expected shape: {e}",
                request.template
            ))
        })
    }

    fn rule_perceive(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        let narrative = request.binding("narrative");
        let blocks = parse_blocks(narrative);
        let p_nodes: Vec<Value> = blocks
            .iter()
            .map(|b| {
                let status = if negation_re().is_match(&b.content) {
                    NodeStatus::Absent
                } else {
                    NodeStatus::Present
                };
                json!({
                    "content": b.content,
                    "original_text": b.original_text,
                    "status": status,
                })
            })
            .collect();
        let mut sex = "?".to_string();
        let mut age = "?".to_string();
        let mut region = String::new();
        for line in narrative.lines() {
            let t = line.trim();
            if let Some(rest) = t.strip_prefix("Sex:") {
                for part in rest.split(',') {
                    let part = part.trim();
                    if let Some(a) = part.strip_prefix("Age:") {
                        age = a.trim().to_string();
                    } else if !part.is_empty() && sex == "?" {
                        sex = part.to_string();
                    }
                }
            } else if let Some(rest) = t.strip_prefix("Geographical region:") {
                region = rest.trim().to_string();
            }
        }
        let lead = blocks
            .first()
            .map(|b| {
                let mut s: String = b.content.chars().take(60).collect();
                if b.content.chars().count() > 60 {
                    s.push('…');
                }
                s
            })
            .unwrap_or_default();
        let one_liner = if region.is_empty() {
            format!("{sex}, {age}: {lead}")
        } else {
            format!("{sex}, {age}, {region}: {lead}")
        };
        Ok(json!({
            "problem_representation_one_liner": one_liner,
            "p_nodes": p_nodes,
        }))
    }

    fn rule_intuitive_ddx(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        let narrative = normalize_match(request.binding("narrative"));
        let k: usize = request.binding("k").trim().parse().map_err(|_| {
            ProviderError::Config(format!(
                "mock: binding `k` must be a positive integer, got `{}`",
                request.binding("k")
            ))
        })?;
        let preferred = hint_labels(request.binding("critic_hints"));
        let mut scored: Vec<(f64, String, usize)> = self
            .bundle
            .diseases
            .iter()
            .map(|d| {
                let matched = d
                    .features
                    .iter()
                    .filter(|f| f.kind == KnowledgeKind::General && feature_matches(f, &narrative))
                    .count();
                let mut score = d.prior + INTUITION_PATTERN_WEIGHT * matched as f64;
                if preferred.iter().any(|p| normalize_label(p) == normalize_label(&d.label)) {
                    score += HINT_BOOST;
                }
                (score, d.label.clone(), matched)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite intuition scores")
                .then_with(|| a.1.cmp(&b.1))
        });
        let total_matched: usize = scored.iter().map(|s| s.2).sum();
        let candidates: Vec<String> = scored.into_iter().take(k).map(|(_, l, _)| l).collect();
        Ok(json!({
            "candidates": candidates,
            "rationale": format!(
                "base rates adjusted by {total_matched} familiar surface pattern(s)"
            ),
        }))
    }

    fn rule_pivot_discovery(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        #[derive(Deserialize)]
        struct Snippet {
            #[allow(dead_code)]
            disease: String,
            content: String,
            #[serde(default)]
            provenance: String,
        }
        let candidates: Vec<String> = Self::parse_binding(request, "candidates")?;
        let snippets: Vec<Snippet> = Self::parse_binding(request, "snippets")?;
        let mut seen = std::collections::BTreeSet::new();
        let mut k_nodes = Vec::new();
        for snippet in &snippets {
            let Some((_, feature)) = self.bundle.feature_by_content(&snippet.content) else {
                continue;
            };
            if !seen.insert(normalize_label(&feature.content)) {
                continue;
            }
            let supported: Vec<String> = candidates
                .iter()
                .filter(|c| feature.supports.iter().any(|s| normalize_label(s) == normalize_label(c)))
                .cloned()
                .collect();
            let ruled_out: Vec<String> = candidates
                .iter()
                .filter(|c| feature.rules_out.iter().any(|s| normalize_label(s) == normalize_label(c)))
                .cloned()
                .collect();
            // A pivot that ends up stanceless inside this candidate set is
            // demoted: pivots must discriminate between live hypotheses.
            let kind = if supported.is_empty() && ruled_out.is_empty() {
                KnowledgeKind::General
            } else {
                feature.kind
            };
            k_nodes.push(json!({
                "content": feature.content,
                "kind": kind,
                "importance": feature.importance,
                "supported_candidates": supported,
                "ruled_out_candidates": ruled_out,
                "provenance": snippet.provenance,
            }));
        }
        Ok(json!({ "k_nodes": k_nodes }))
    }

    fn rule_relation_classify(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        #[derive(Deserialize)]
        struct PNode {
            id: String,
            content: String,
            status: NodeStatus,
        }
        #[derive(Deserialize)]
        struct KNode {
            id: String,
            content: String,
        }
        let candidates: Vec<String> = Self::parse_binding(request, "candidates")?;
        let p_nodes: Vec<PNode> = Self::parse_binding(request, "p_nodes")?;
        let k_nodes: Vec<KNode> = Self::parse_binding(request, "k_nodes")?;
        let mut patient_links = Vec::new();
        for p in &p_nodes {
            let norm = normalize_match(&p.content);
            for k in &k_nodes {
                let Some((_, feature)) = self.bundle.feature_by_content(&k.content) else {
                    continue;
                };
                if feature_matches(feature, &norm) {
                    patient_links.push(json!({
                        "p_id": p.id,
                        "k_id": k.id,
                        "relation": if p.status == NodeStatus::Present { "matching" } else { "conflict" },
                    }));
                }
            }
        }
        let mut stance_links = Vec::new();
        for k in &k_nodes {
            let Some((_, feature)) = self.bundle.feature_by_content(&k.content) else {
                continue;
            };
            for c in &candidates {
                if feature.supports.iter().any(|s| normalize_label(s) == normalize_label(c)) {
                    stance_links.push(json!({"k_id": k.id, "disease": c, "relation": "support"}));
                } else if feature.rules_out.iter().any(|s| normalize_label(s) == normalize_label(c)) {
                    stance_links.push(json!({"k_id": k.id, "disease": c, "relation": "rule_out"}));
                }
            }
        }
        Ok(json!({ "patient_links": patient_links, "stance_links": stance_links }))
    }

    fn rule_reexamine(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        let narrative = request.binding("narrative");
        let expected = request.binding("expected_content");
        let Some((_, feature)) = self.bundle.feature_by_content(expected) else {
            return Ok(json!({ "found": false }));
        };
        let patterns = if feature.reexamine_patterns.is_empty() {
            &feature.match_patterns
        } else {
            &feature.reexamine_patterns
        };
        for line in narrative.lines() {
            let norm = normalize_match(line);
            if norm.is_empty() {
                continue;
            }
            if patterns
                .iter()
                .any(|p| !p.trim().is_empty() && norm.contains(&normalize_match(p)))
            {
                return Ok(json!({
                    "found": true,
                    "original_text": line.trim(),
                    "content": strip_bullet(line),
                }));
            }
        }
        Ok(json!({ "found": false }))
    }

    fn rule_evidence_audit(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        let facts: Vec<CandidateFacts> = Self::parse_binding(request, "facts")?;
        if facts.is_empty() {
            return Err(ProviderError::Config(
                "mock: evidence audit requires at least one candidate".into(),
            ));
        }
        let exemplars: Vec<String> = Self::parse_binding(request, "exemplars")?;
        let outcome = tiered_rank(&facts);
        let mut tier_log = outcome.tier_log.clone();
        let mut diagnosis = outcome
            .top()
            .expect("non-empty facts yield a winner")
            .to_string();
        for hint in hint_labels(request.binding("critic_hints")) {
            let hinted = facts.iter().find(|f| {
                normalize_label(&f.label) == normalize_label(&hint) && !f.fatal_conflict
            });
            if let Some(f) = hinted {
                tier_log.push(format!(
                    "reviewer guidance: re-weighed the evidence in favor of `{}`",
                    f.label
                ));
                diagnosis = f.label.clone();
                break;
            }
        }
        let rationale = format!(
            "tiered audit over {} candidate(s), {} precedent case(s) consulted",
            facts.len(),
            exemplars.len()
        );
        Ok(json!({
            "diagnosis": diagnosis,
            "rationale": rationale,
            "tier_log": tier_log,
        }))
    }

    fn rule_critic_feedback(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        let truth = request.binding("truth_label");
        let predicted = request.binding("predicted_label");
        let round = request.binding("round");
        Ok(json!({
            "feedback": format!(
                "Round {round}: the answer `{predicted}` missed the confirmed diagnosis. \
                 Re-weigh the findings that argue for the confirmed condition instead of \
                 anchoring on familiar surface patterns. prefer:{truth}"
            ),
        }))
    }

    fn rule_narrate(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        #[derive(Deserialize)]
        struct Case {
            sex: String,
            age: u32,
            region: String,
            symptoms: Vec<String>,
            antecedents: Vec<String>,
        }
        let case: Case = Self::parse_binding(request, "case")?;
        let mut out = String::new();
        out.push_str(&format!("Sex: {}, Age: {}\n", case.sex, case.age));
        out.push_str(&format!("Geographical region: {}\n\n", case.region));
        out.push_str("Symptoms:\n---------\n");
        for s in &case.symptoms {
            out.push_str(&format!("- {s}\n"));
        }
        out.push_str("\nAntecedents:\n------------\n");
        for a in &case.antecedents {
            out.push_str(&format!("- {a}\n"));
        }
        Ok(json!({ "narrative": out }))
    }

    fn rule_extract_discriminative(
        &self,
        request: &GenerationRequest,
    ) -> Result<Value, ProviderError> {
        let narrative = request.binding("narrative");
        let control = self.bundle.find_disease(request.binding("control_diagnosis"));
        let trap = self.bundle.find_disease(request.binding("trap_diagnosis"));
        let (Some(control), Some(trap)) = (control, trap) else {
            return Ok(json!({ "phrase": "" }));
        };
        // Pivot findings first: the most discriminative phrase wins.
        for want_pivot in [true, false] {
            for line in narrative.lines() {
                let norm = normalize_match(line);
                if norm.is_empty() {
                    continue;
                }
                let control_hit = control.features.iter().any(|f| {
                    (f.kind == KnowledgeKind::Pivot) == want_pivot && feature_matches(f, &norm)
                });
                let trap_hit = trap.features.iter().any(|f| feature_matches(f, &norm));
                if control_hit && !trap_hit {
                    return Ok(json!({ "phrase": strip_bullet(line) }));
                }
            }
        }
        Ok(json!({ "phrase": "" }))
    }

    fn rule_gen_trap_info(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        let Some(trap) = self.bundle.find_disease(request.binding("trap_diagnosis")) else {
            return Ok(json!({ "phrase": "" }));
        };
        let pick = trap
            .features
            .iter()
            .find(|f| f.kind == KnowledgeKind::Pivot && f.patient_phrase.is_some())
            .or_else(|| trap.features.iter().find(|f| f.patient_phrase.is_some()));
        Ok(json!({
            "phrase": pick.and_then(|f| f.patient_phrase.clone()).unwrap_or_default(),
        }))
    }

    fn rule_rewrite_narrative(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        let narrative = request.binding("narrative");
        let out_norm = normalize_match(request.binding("phrase_out"));
        let phrase_in = request.binding("phrase_in");
        if out_norm.is_empty() {
            return Ok(json!({ "narrative": narrative }));
        }
        let mut lines: Vec<String> = narrative.split('\n').map(|l| l.to_string()).collect();
        for line in lines.iter_mut() {
            if normalize_match(line).contains(&out_norm) {
                let indent_len = line.len() - line.trim_start().len();
                let indent = &line[..indent_len];
                let rest = line.trim_start();
                let bullet = if rest.starts_with("- ") {
                    "- "
                } else if rest.starts_with("* ") {
                    "* "
                } else {
                    ""
                };
                *line = format!("{indent}{bullet}{phrase_in}");
                break;
            }
        }
        Ok(json!({ "narrative": lines.join("\n") }))
    }

    fn rule_judge_verify(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        let narrative = request.binding("narrative");
        let norm = normalize_match(narrative);
        let trap = self.bundle.find_disease(request.binding("trap_diagnosis"));
        let trap_supported = trap.is_some_and(|d| {
            d.features
                .iter()
                .any(|f| f.kind == KnowledgeKind::Pivot && feature_matches(f, &norm))
        });
        let out_norm = normalize_match(request.binding("phrase_out"));
        let control_gone = out_norm.is_empty() || !norm.contains(&out_norm);
        let correct = trap_supported && control_gone;
        let plausibility = 7 + (stable_u64(&format!("{}|plausibility|{narrative}", self.seed)) % 3);
        let fluency = 7 + (stable_u64(&format!("{}|fluency|{narrative}", self.seed)) % 3);
        Ok(json!({
            "correct": correct,
            "plausibility": plausibility,
            "fluency": fluency,
        }))
    }

    fn rule_failure_audit(&self, request: &GenerationRequest) -> Result<Value, ProviderError> {
        let candidates: Vec<String> = Self::parse_binding(request, "candidates")?;
        let trap = request.binding("trap_diagnosis");
        let considered = candidates
            .iter()
            .any(|c| normalize_label(c) == normalize_label(trap));
        let (mode, rationale) = if considered {
            (
                "overthinking",
                format!("`{trap}` was on the differential but was argued away"),
            )
        } else {
            (
                "underthinking",
                format!("`{trap}` never entered the differential; anchored on surface patterns"),
            )
        };
        Ok(json!({ "mode": mode, "rationale": rationale }))
    }
}

impl RawGenerator for MockGenerator {
    fn attempt(
        &self,
        request: &GenerationRequest,
        attempt: u32,
    ) -> Result<GenerationResult, ProviderError> {
        let payload = if let Some(canned) = self.find_override(request) {
            let idx = (attempt as usize).min(canned.payloads.len() - 1);
            canned.payloads[idx].clone()
        } else {
            match request.template {
                PromptTemplateId::PerceiveProblem => self.rule_perceive(request)?,
                PromptTemplateId::IntuitiveDdx => self.rule_intuitive_ddx(request)?,
                PromptTemplateId::PivotDiscovery => self.rule_pivot_discovery(request)?,
                PromptTemplateId::RelationClassify => self.rule_relation_classify(request)?,
                PromptTemplateId::Reexamine => self.rule_reexamine(request)?,
                PromptTemplateId::EvidenceAudit => self.rule_evidence_audit(request)?,
                PromptTemplateId::CriticFeedback => self.rule_critic_feedback(request)?,
                PromptTemplateId::Narrate => self.rule_narrate(request)?,
                PromptTemplateId::ExtractDiscriminative => {
                    self.rule_extract_discriminative(request)?
                }
                PromptTemplateId::GenTrapInfo => self.rule_gen_trap_info(request)?,
                PromptTemplateId::RewriteNarrative => self.rule_rewrite_narrative(request)?,
                PromptTemplateId::JudgeVerify => self.rule_judge_verify(request)?,
                PromptTemplateId::FailureAudit => self.rule_failure_audit(request)?,
            }
        };
        let raw_text = payload.to_string();
        let prompt_bytes: usize = request.bindings.values().map(String::len).sum();
        Ok(GenerationResult {
            token_counts: TokenCounts {
                prompt: (prompt_bytes as u64).div_ceil(4),
                completion: (raw_text.len() as u64).div_ceil(4),
            },
            payload,
            raw_text,
        })
    }
}
