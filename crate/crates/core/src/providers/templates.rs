//! Prompt template registry: template identifiers, their required input
//! bindings, the JSON payload schema each one must produce, and the prompt
//! text rendered for remote model backends.
//!
//! Every call site in the pipeline addresses the generator through a
//! [`PromptTemplateId`]; the gateway uses this module to reject requests
//! with missing bindings up front and to validate response payloads before
//! they reach any consumer.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Identifier for every model interaction the system performs.
///
/// The four `benchforge` templates drive counterfactual pair construction,
/// the seven agent templates drive the staged diagnosis pipeline, and the
/// remaining two serve the training critic and failure triage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplateId {
    /// Find the single narrative phrase that discriminates the control
    /// diagnosis from the trap diagnosis.
    ExtractDiscriminative,
    /// Produce an isomorphic patient phrase grounded in the trap
    /// diagnosis' knowledge list.
    GenTrapInfo,
    /// Surgically replace one sentence of a narrative with new content.
    RewriteNarrative,
    /// Judge a constructed trap narrative for correctness / plausibility /
    /// fluency.
    JudgeVerify,
    /// Structure a raw narrative into patient observation nodes.
    PerceiveProblem,
    /// Fast first-impression differential (candidate labels, ranked).
    IntuitiveDdx,
    /// Propose discriminating knowledge nodes for a candidate set.
    PivotDiscovery,
    /// Classify observation-knowledge and knowledge-candidate relations.
    RelationClassify,
    /// Re-read the narrative hunting for one expected piece of evidence.
    Reexamine,
    /// Final tiered audit over the assembled evidence balance sheet.
    EvidenceAudit,
    /// Post-hoc critique of a wrong training answer (produces hints).
    CriticFeedback,
    /// Render a structured source case into a first-person narrative.
    Narrate,
    /// Triage a trap failure into underthinking vs overthinking.
    FailureAudit,
}

impl PromptTemplateId {
    /// All templates, in a fixed order (useful for exhaustive tests).
    pub const ALL: [PromptTemplateId; 13] = [
        PromptTemplateId::ExtractDiscriminative,
        PromptTemplateId::GenTrapInfo,
        PromptTemplateId::RewriteNarrative,
        PromptTemplateId::JudgeVerify,
        PromptTemplateId::PerceiveProblem,
        PromptTemplateId::IntuitiveDdx,
        PromptTemplateId::PivotDiscovery,
        PromptTemplateId::RelationClassify,
        PromptTemplateId::Reexamine,
        PromptTemplateId::EvidenceAudit,
        PromptTemplateId::CriticFeedback,
        PromptTemplateId::Narrate,
        PromptTemplateId::FailureAudit,
    ];

    /// Stable wire name (matches the serde representation).
    pub fn name(self) -> &'static str {
        match self {
            PromptTemplateId::ExtractDiscriminative => "extract_discriminative",
            PromptTemplateId::GenTrapInfo => "gen_trap_info",
            PromptTemplateId::RewriteNarrative => "rewrite_narrative",
            PromptTemplateId::JudgeVerify => "judge_verify",
            PromptTemplateId::PerceiveProblem => "perceive_problem",
            PromptTemplateId::IntuitiveDdx => "intuitive_ddx",
            PromptTemplateId::PivotDiscovery => "pivot_discovery",
            PromptTemplateId::RelationClassify => "relation_classify",
            PromptTemplateId::Reexamine => "reexamine",
            PromptTemplateId::EvidenceAudit => "evidence_audit",
            PromptTemplateId::CriticFeedback => "critic_feedback",
            PromptTemplateId::Narrate => "narrate",
            PromptTemplateId::FailureAudit => "failure_audit",
        }
    }

    /// Bindings that must be present on a request for this template.
    ///
    /// Optional bindings (notably `critic_hints`) are not listed; backends
    /// treat their absence as "empty".
    pub fn required_bindings(self) -> &'static [&'static str] {
        match self {
            PromptTemplateId::ExtractDiscriminative => &[
                "narrative",
                "control_diagnosis",
                "trap_diagnosis",
                "control_knowledge",
                "trap_knowledge",
            ],
            PromptTemplateId::GenTrapInfo => &["phrase_out", "trap_diagnosis", "trap_knowledge"],
            PromptTemplateId::RewriteNarrative => &["narrative", "phrase_out", "phrase_in"],
            PromptTemplateId::JudgeVerify => &[
                "narrative",
                "trap_diagnosis",
                "control_diagnosis",
                "phrase_out",
                "phrase_in",
            ],
            PromptTemplateId::PerceiveProblem => &["narrative"],
            PromptTemplateId::IntuitiveDdx => &["narrative", "k"],
            PromptTemplateId::PivotDiscovery => &["candidates", "snippets"],
            PromptTemplateId::RelationClassify => &["candidates", "p_nodes", "k_nodes"],
            PromptTemplateId::Reexamine => &["narrative", "expected_content"],
            PromptTemplateId::EvidenceAudit => &["facts", "intuition", "exemplars"],
            PromptTemplateId::CriticFeedback => &["truth_label", "predicted_label", "round"],
            PromptTemplateId::Narrate => &["case"],
            PromptTemplateId::FailureAudit => &["key_evidence", "trap_diagnosis", "candidates"],
        }
    }
}

impl fmt::Display for PromptTemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Why a payload failed schema validation. Rendered into the final error
/// message after retries are exhausted.
fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn want_object<'a>(v: &'a Value, ctx: &str) -> Result<&'a serde_json::Map<String, Value>, String> {
    v.as_object()
        .ok_or_else(|| format!("{ctx}: expected object, got {}", type_name(v)))
}

fn want_str<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a str, String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(format!("`{key}`: expected string, got {}", type_name(other))),
        None => Err(format!("missing key `{key}`")),
    }
}

fn want_nonempty_str<'a>(
    obj: &'a serde_json::Map<String, Value>,
    key: &str,
) -> Result<&'a str, String> {
    let s = want_str(obj, key)?;
    if s.trim().is_empty() {
        return Err(format!("`{key}`: must be a non-empty string"));
    }
    Ok(s)
}

fn want_bool(obj: &serde_json::Map<String, Value>, key: &str) -> Result<bool, String> {
    match obj.get(key) {
        Some(Value::Bool(b)) => Ok(*b),
        Some(other) => Err(format!("`{key}`: expected bool, got {}", type_name(other))),
        None => Err(format!("missing key `{key}`")),
    }
}

fn want_array<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a [Value], String> {
    match obj.get(key) {
        Some(Value::Array(a)) => Ok(a),
        Some(other) => Err(format!("`{key}`: expected array, got {}", type_name(other))),
        None => Err(format!("missing key `{key}`")),
    }
}

fn want_str_array(obj: &serde_json::Map<String, Value>, key: &str) -> Result<(), String> {
    for (i, item) in want_array(obj, key)?.iter().enumerate() {
        if !item.is_string() {
            return Err(format!("`{key}[{i}]`: expected string, got {}", type_name(item)));
        }
    }
    Ok(())
}

fn want_enum_str(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    allowed: &[&str],
) -> Result<(), String> {
    let s = want_str(obj, key)?;
    if allowed.contains(&s) {
        Ok(())
    } else {
        Err(format!("`{key}`: `{s}` not one of {allowed:?}"))
    }
}

fn want_score(obj: &serde_json::Map<String, Value>, key: &str) -> Result<(), String> {
    match obj.get(key).and_then(Value::as_i64) {
        Some(n) if (1..=10).contains(&n) => Ok(()),
        Some(n) => Err(format!("`{key}`: {n} outside 1..=10")),
        None => Err(format!("`{key}`: expected integer 1..=10")),
    }
}

/// Validate `payload` against the expected response schema for `template`.
///
/// Validation checks the presence and types of required keys (and enum /
/// range constraints where they exist); unknown extra keys are tolerated so
/// that chatty model backends do not fail on harmless additions.
pub fn validate_payload(template: PromptTemplateId, payload: &Value) -> Result<(), String> {
    let obj = want_object(payload, "payload")?;
    match template {
        PromptTemplateId::ExtractDiscriminative | PromptTemplateId::GenTrapInfo => {
            // An empty phrase is schema-valid: it is the backend's way of
            // saying "no such phrase exists", which callers map to a
            // rejection reason rather than a transport failure.
            want_str(obj, "phrase")?;
            Ok(())
        }
        PromptTemplateId::RewriteNarrative | PromptTemplateId::Narrate => {
            want_nonempty_str(obj, "narrative")?;
            Ok(())
        }
        PromptTemplateId::JudgeVerify => {
            want_bool(obj, "correct")?;
            want_score(obj, "plausibility")?;
            want_score(obj, "fluency")?;
            Ok(())
        }
        PromptTemplateId::PerceiveProblem => {
            want_nonempty_str(obj, "problem_representation_one_liner")?;
            let nodes = want_array(obj, "p_nodes")?;
            if nodes.is_empty() {
                return Err("`p_nodes`: must not be empty".into());
            }
            for (i, node) in nodes.iter().enumerate() {
                let node = want_object(node, &format!("`p_nodes[{i}]`"))?;
                want_nonempty_str(node, "content").map_err(|e| format!("`p_nodes[{i}]`.{e}"))?;
                want_str(node, "original_text").map_err(|e| format!("`p_nodes[{i}]`.{e}"))?;
                want_enum_str(node, "status", &["present", "absent"])
                    .map_err(|e| format!("`p_nodes[{i}]`.{e}"))?;
            }
            Ok(())
        }
        PromptTemplateId::IntuitiveDdx => {
            let cands = want_array(obj, "candidates")?;
            if cands.is_empty() {
                return Err("`candidates`: must not be empty".into());
            }
            for (i, c) in cands.iter().enumerate() {
                match c {
                    Value::String(s) if !s.trim().is_empty() => {}
                    _ => return Err(format!("`candidates[{i}]`: expected non-empty string")),
                }
            }
            want_str(obj, "rationale")?;
            Ok(())
        }
        PromptTemplateId::PivotDiscovery => {
            for (i, node) in want_array(obj, "k_nodes")?.iter().enumerate() {
                let node = want_object(node, &format!("`k_nodes[{i}]`"))?;
                let ctx = |e: String| format!("`k_nodes[{i}]`.{e}");
                want_nonempty_str(node, "content").map_err(ctx)?;
                want_enum_str(node, "kind", &["pivot", "general"]).map_err(ctx)?;
                want_enum_str(
                    node,
                    "importance",
                    &["pathognomonic", "essential", "typical", "supportive"],
                )
                .map_err(ctx)?;
                want_str_array(node, "supported_candidates").map_err(ctx)?;
                want_str_array(node, "ruled_out_candidates").map_err(ctx)?;
            }
            Ok(())
        }
        PromptTemplateId::RelationClassify => {
            for (i, link) in want_array(obj, "patient_links")?.iter().enumerate() {
                let link = want_object(link, &format!("`patient_links[{i}]`"))?;
                let ctx = |e: String| format!("`patient_links[{i}]`.{e}");
                want_nonempty_str(link, "p_id").map_err(ctx)?;
                want_nonempty_str(link, "k_id").map_err(ctx)?;
                want_enum_str(link, "relation", &["matching", "conflict"]).map_err(ctx)?;
            }
            for (i, link) in want_array(obj, "stance_links")?.iter().enumerate() {
                let link = want_object(link, &format!("`stance_links[{i}]`"))?;
                let ctx = |e: String| format!("`stance_links[{i}]`.{e}");
                want_nonempty_str(link, "k_id").map_err(ctx)?;
                want_nonempty_str(link, "disease").map_err(ctx)?;
                want_enum_str(link, "relation", &["support", "rule_out"]).map_err(ctx)?;
            }
            Ok(())
        }
        PromptTemplateId::Reexamine => {
            let found = want_bool(obj, "found")?;
            if found {
                want_nonempty_str(obj, "original_text")?;
                want_nonempty_str(obj, "content")?;
            }
            Ok(())
        }
        PromptTemplateId::EvidenceAudit => {
            want_nonempty_str(obj, "diagnosis")?;
            want_str(obj, "rationale")?;
            want_str_array(obj, "tier_log")?;
            Ok(())
        }
        PromptTemplateId::CriticFeedback => {
            want_nonempty_str(obj, "feedback")?;
            Ok(())
        }
        PromptTemplateId::FailureAudit => {
            want_enum_str(obj, "mode", &["underthinking", "overthinking"])?;
            want_str(obj, "rationale")?;
            Ok(())
        }
    }
}

/// Render the (system, user) prompt pair sent to a remote chat-completion
/// backend. The mock backend never calls this; it consumes bindings
/// directly.
pub fn render_prompt(
    template: PromptTemplateId,
    bindings: &BTreeMap<String, String>,
) -> (String, String) {
    let get = |k: &str| bindings.get(k).map(String::as_str).unwrap_or("");
    let hints = get("critic_hints");
    let hint_block = if hints.is_empty() {
        String::new()
    } else {
        format!("\nReviewer guidance from a previous attempt (weigh it seriously):\n{hints}\n")
    };
    let (system, user) = match template {
        PromptTemplateId::ExtractDiscriminative => (
            "You are a senior medical expert performing differential diagnosis. \
             Use ONLY the reference knowledge provided below; do not rely on your own prior knowledge."
                .to_string(),
            format!(
                "Reference knowledge for '{ctrl}':\n{ck}\n\nReference knowledge for '{trap}':\n{tk}\n\n\
                 Patient narrative:\n---\n{n}\n---\n\n\
                 Identify the single most critical, atomic phrase in the narrative that is typical of \
                 '{ctrl}' but NOT typical of '{trap}'. Respond in JSON: {{\"phrase\": \"exact phrase from the narrative\"}}. \
                 If no such phrase exists respond {{\"phrase\": \"\"}}.",
                ctrl = get("control_diagnosis"),
                trap = get("trap_diagnosis"),
                ck = get("control_knowledge"),
                tk = get("trap_knowledge"),
                n = get("narrative"),
            ),
        ),
        PromptTemplateId::GenTrapInfo => (
            "You are a medical writer generating an isomorphic clinical finding, \
             grounded strictly in the provided reference knowledge."
                .to_string(),
            format!(
                "Reference knowledge for '{trap}':\n{tk}\n\n\
                 The original phrase (pointing elsewhere): \"{out}\"\n\n\
                 Select the evidence from the list above that is most isomorphic to the original phrase \
                 in clinical gravity and role, and rephrase it as a concise, atomic, first-person patient \
                 statement. Respond in JSON: {{\"phrase\": \"...\"}}.",
                trap = get("trap_diagnosis"),
                tk = get("trap_knowledge"),
                out = get("phrase_out"),
            ),
        ),
        PromptTemplateId::RewriteNarrative => (
            "You are an expert medical writer performing precise narrative surgery.".to_string(),
            format!(
                "Original patient narrative:\n---\n{n}\n---\n\n\
                 1. Locate the sentence containing \"{out}\".\n\
                 2. Rewrite that single sentence to instead convey: \"{inp}\".\n\
                 3. The new sentence must be grammatical and fit the surrounding style exactly.\n\
                 4. Do not change any other part of the narrative.\n\
                 Respond in JSON: {{\"narrative\": \"the complete rewritten narrative\"}}.",
                n = get("narrative"),
                out = get("phrase_out"),
                inp = get("phrase_in"),
            ),
        ),
        PromptTemplateId::JudgeVerify => (
            "You are an expert clinical diagnostician acting as an impartial judge of a \
             synthetically modified case."
                .to_string(),
            format!(
                "Trap narrative:\n---\n{n}\n---\n\n\
                 Stated target diagnosis: '{trap}'. The phrase \"{out}\" was replaced by \"{inp}\" \
                 (the original case pointed to '{ctrl}').\n\n\
                 Assess three criteria: (1) correctness — read independently, does the narrative make \
                 '{trap}' a plausible and likely diagnosis? (2) medical plausibility, 1-10; \
                 (3) narrative fluency of the integration, 1-10.\n\
                 Respond in JSON: {{\"correct\": true/false, \"plausibility\": n, \"fluency\": n}}.",
                n = get("narrative"),
                trap = get("trap_diagnosis"),
                ctrl = get("control_diagnosis"),
                out = get("phrase_out"),
                inp = get("phrase_in"),
            ),
        ),
        PromptTemplateId::PerceiveProblem => (
            "You are a senior clinical diagnostician performing problem representation: \
             transform a raw narrative into structured patient features with precise \
             semantic qualifiers."
                .to_string(),
            format!(
                "{hint_block}Patient narrative:\n---\n{n}\n---\n\n\
                 Extract every clinically meaningful observation. Mark status \"absent\" only when \
                 the text explicitly negates it (no / not / denies / without). `original_text` must \
                 be copied verbatim from the narrative.\n\
                 Respond in JSON: {{\"problem_representation_one_liner\": \"...\", \
                 \"p_nodes\": [{{\"content\": \"...\", \"original_text\": \"...\", \"status\": \"present|absent\"}}]}}.",
                n = get("narrative"),
            ),
        ),
        PromptTemplateId::IntuitiveDdx => (
            "You are an experienced physician giving a fast first-impression differential."
                .to_string(),
            format!(
                "{hint_block}Patient narrative:\n---\n{n}\n---\n\n\
                 List the {k} most likely diagnoses, most likely first. \
                 Respond in JSON: {{\"candidates\": [\"...\"], \"rationale\": \"...\"}}.",
                n = get("narrative"),
                k = get("k"),
            ),
        ),
        PromptTemplateId::PivotDiscovery => (
            "You are an expert diagnostician building a discrimination matrix across \
             competing hypotheses."
                .to_string(),
            format!(
                "Candidates: {c}\n\nRetrieved knowledge snippets:\n{s}\n\n\
                 Derive knowledge nodes. A pivot is a discriminating feature that separates two or \
                 more candidates; assign each node the candidates it supports and the candidates it \
                 rules out.\n\
                 Respond in JSON: {{\"k_nodes\": [{{\"content\": \"...\", \"kind\": \"pivot|general\", \
                 \"importance\": \"pathognomonic|essential|typical|supportive\", \
                 \"supported_candidates\": [..], \"ruled_out_candidates\": [..], \"provenance\": \"...\"}}]}}.",
                c = get("candidates"),
                s = get("snippets"),
            ),
        ),
        PromptTemplateId::RelationClassify => (
            "You are a meticulous clinical auditor wiring observed features to knowledge."
                .to_string(),
            format!(
                "Candidates: {c}\nPatient nodes: {p}\nKnowledge nodes: {k}\n\n\
                 For each patient/knowledge pair that is related, emit `matching` when the observation \
                 instantiates the knowledge and the finding is present, `conflict` when the finding is \
                 explicitly absent. For each knowledge/candidate pair emit `support` or `rule_out`. \
                 Omit unrelated pairs.\n\
                 Respond in JSON: {{\"patient_links\": [{{\"p_id\": \"..\", \"k_id\": \"..\", \"relation\": \
                 \"matching|conflict\"}}], \"stance_links\": [{{\"k_id\": \"..\", \"disease\": \"..\", \
                 \"relation\": \"support|rule_out\"}}]}}.",
                c = get("candidates"),
                p = get("p_nodes"),
                k = get("k_nodes"),
            ),
        ),
        PromptTemplateId::Reexamine => (
            "You are re-reading a patient narrative hunting for one specific expected finding."
                .to_string(),
            format!(
                "Patient narrative:\n---\n{n}\n---\n\n\
                 Expected finding: \"{e}\"\n\n\
                 Is this finding present anywhere in the narrative, even phrased differently? \
                 Respond in JSON: {{\"found\": true, \"original_text\": \"verbatim narrative text\", \
                 \"content\": \"normalized statement\"}} or {{\"found\": false}}.",
                n = get("narrative"),
                e = get("expected_content"),
            ),
        ),
        PromptTemplateId::EvidenceAudit => (
            "You are the chief medical auditor and final decision maker. Audit the fast \
             first impression against the causal evidence map using a strict tier hierarchy: \
             Tier 1 — disqualify any candidate whose essential finding the patient explicitly \
             lacks; Tier 2 — a candidate backed by a matched pivot outranks one backed only by \
             general features; Tier 3 — break ties by explanatory coverage (score), then by the \
             first impression order."
                .to_string(),
            format!(
                "{hint_block}First impression (ranked): {i}\n\nEvidence balance sheet per candidate:\n{f}\n\n\
                 Similar precedent cases:\n{e}\n\n\
                 Respond in JSON: {{\"diagnosis\": \"..\", \"rationale\": \"..\", \"tier_log\": [\"..\"]}}.",
                i = get("intuition"),
                f = get("facts"),
                e = get("exemplars"),
            ),
        ),
        PromptTemplateId::CriticFeedback => (
            "You are a senior attending reviewing a trainee's missed diagnosis and writing \
             targeted guidance for the next attempt."
                .to_string(),
            format!(
                "On round {r} the trainee answered '{p}' but the confirmed diagnosis is '{t}'. \
                 Write one short paragraph of guidance telling the trainee what evidence to \
                 re-weigh, and end with the literal token `prefer:{t}`.\n\
                 Respond in JSON: {{\"feedback\": \"...\"}}.",
                r = get("round"),
                p = get("predicted_label"),
                t = get("truth_label"),
            ),
        ),
        PromptTemplateId::Narrate => (
            "You are transcribing a structured case record into the standard first-person \
             intake narrative layout."
                .to_string(),
            format!(
                "Case record (JSON): {c}\n\n\
                 Render it with a `Sex: .., Age: ..` header line, a `Geographical region:` line, a \
                 `Symptoms:` section and an `Antecedents:` section, one `- ` bullet per finding, \
                 preserving every finding verbatim.\n\
                 Respond in JSON: {{\"narrative\": \"...\"}}.",
                c = get("case"),
            ),
        ),
        PromptTemplateId::FailureAudit => (
            "You are auditing a diagnostic failure on an adversarial case.".to_string(),
            format!(
                "The decisive evidence was \"{k}\" and the correct answer was '{t}'. \
                 The model's first-impression candidate list was {c}.\n\
                 If the correct answer never entered the candidate list, the failure is \
                 `underthinking` (anchored too early); if it was considered and still rejected, \
                 the failure is `overthinking` (explained away).\n\
                 Respond in JSON: {{\"mode\": \"underthinking|overthinking\", \"rationale\": \"...\"}}.",
                k = get("key_evidence"),
                t = get("trap_diagnosis"),
                c = get("candidates"),
            ),
        ),
    };
    (system, user)
}
