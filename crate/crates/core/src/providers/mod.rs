//! Model and knowledge gateways.
//!
//! Everything that would normally talk to a hosted LLM or a medical
//! knowledge service goes through two narrow traits:
//!
//! * [`Generator`] — schema-validated structured generation addressed by
//!   [`PromptTemplateId`]. The deterministic [`MockGenerator`] answers from
//!   a [`FixtureBundle`]; [`RemoteGenerator`] speaks a chat-completions
//!   wire format. Both are wrapped in a [`Gateway`] that validates every
//!   payload and performs bounded re-asks (at most two retries) before
//!   surfacing a typed error — an invalid payload is never silently
//!   repaired.
//! * [`KnowledgeSource`] — snippet retrieval per (disease, purpose), with
//!   an optional write-through disk cache ([`CachedKnowledge`]).
//!
//! Seeds travel inside each [`GenerationRequest`], so a backend is a pure
//! function of (template, bindings, seed, attempt); nothing here consults a
//! clock or global RNG.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embed::EmbedError;

pub mod fixtures;
pub mod knowledge;
pub mod mock;
pub mod remote;
pub mod templates;

pub use fixtures::{CannedResponse, DiseaseFixture, FeatureFixture, FixtureBundle};
pub use knowledge::{CachedKnowledge, KnowledgePurpose, KnowledgeSnippet, KnowledgeSource, MockKnowledge};
pub use mock::MockGenerator;
pub use remote::{RemoteEmbedder, RemoteGenerator, RemoteKnowledge};
pub use templates::{render_prompt, validate_payload, PromptTemplateId};

/// Maximum number of re-asks after the first attempt of a generation call.
pub const MAX_GENERATION_RETRIES: u32 = 2;

/// Errors crossing the provider boundary.
#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    /// The network / process boundary failed (timeouts, HTTP errors,
    /// unparseable transport envelopes). Retried by the gateway.
    #[error("transport failure at {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    /// The backend answered, but the payload failed schema validation on
    /// every attempt.
    #[error("schema violation for template `{template}` after {attempts} attempt(s): {reason}")]
    SchemaViolation {
        template: PromptTemplateId,
        reason: String,
        attempts: u32,
    },
    /// The request itself was malformed: a template binding is missing.
    #[error("template `{template}` requires binding `{binding}`")]
    MissingBinding {
        template: PromptTemplateId,
        binding: String,
    },
    /// Provider configuration or fixture data is unusable.
    #[error("provider configuration: {0}")]
    Config(String),
    /// Disk cache I/O failed.
    #[error("knowledge cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Token accounting reported by a backend (estimated for the mock).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u64,
    pub completion: u64,
}

/// One structured-generation request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub template: PromptTemplateId,
    /// Named inputs interpolated into the template. Values holding
    /// structured data are JSON-encoded strings.
    pub bindings: BTreeMap<String, String>,
    /// Seed for whatever sampling the backend performs; determinism
    /// requires equal seeds to yield equal responses.
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(template: PromptTemplateId, seed: u64) -> Self {
        GenerationRequest {
            template,
            bindings: BTreeMap::new(),
            seed,
        }
    }

    /// Builder-style binding insertion.
    pub fn bind(mut self, key: &str, value: impl Into<String>) -> Self {
        self.bindings.insert(key.to_string(), value.into());
        self
    }

    pub fn binding(&self, key: &str) -> &str {
        self.bindings.get(key).map(String::as_str).unwrap_or("")
    }
}

/// A schema-valid response from a generation backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Parsed payload, already validated against the template's schema.
    pub payload: Value,
    /// Raw backend text the payload was parsed from.
    pub raw_text: String,
    pub token_counts: TokenCounts,
}

/// A single, unvalidated backend attempt. Implemented by the mock and the
/// remote transport; users call [`Generator`] on a [`Gateway`] instead.
pub trait RawGenerator: Send + Sync {
    /// Produce one candidate response. `attempt` is 0 on the first try and
    /// increments per re-ask, letting backends vary their sampling (or
    /// tests script per-attempt payloads).
    fn attempt(
        &self,
        request: &GenerationRequest,
        attempt: u32,
    ) -> Result<GenerationResult, ProviderError>;
}

/// Schema-validated structured generation.
pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, ProviderError>;
}

/// Wraps a [`RawGenerator`] with binding checks, payload schema validation,
/// and bounded re-asks.
pub struct Gateway<B> {
    backend: B,
    max_retries: u32,
}

impl<B: RawGenerator> Gateway<B> {
    pub fn new(backend: B) -> Self {
        Gateway {
            backend,
            max_retries: MAX_GENERATION_RETRIES,
        }
    }

    /// Override the retry budget (tests use 0 to observe first-attempt
    /// payloads).
    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }
}

impl<B: RawGenerator> Generator for Gateway<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, ProviderError> {
        for binding in request.template.required_bindings() {
            if !request.bindings.contains_key(*binding) {
                return Err(ProviderError::MissingBinding {
                    template: request.template,
                    binding: (*binding).to_string(),
                });
            }
        }
        let mut last_failure: Option<ProviderError> = None;
        let attempts = self.max_retries + 1;
        for attempt in 0..attempts {
            match self.backend.attempt(request, attempt) {
                Ok(result) => match templates::validate_payload(request.template, &result.payload) {
                    Ok(()) => return Ok(result),
                    Err(reason) => {
                        log::warn!(
                            "attempt {attempt} for `{}` returned invalid payload: {reason}",
                            request.template
                        );
                        last_failure = Some(ProviderError::SchemaViolation {
                            template: request.template,
                            reason,
                            attempts: attempt + 1,
                        });
                    }
                },
                Err(err @ ProviderError::Transport { .. }) => {
                    log::warn!("attempt {attempt} for `{}` failed: {err}", request.template);
                    last_failure = Some(err);
                }
                // Anything else (missing bindings, config problems) will not
                // improve on retry; fail fast.
                Err(err) => return Err(err),
            }
        }
        Err(match last_failure {
            Some(ProviderError::SchemaViolation { template, reason, .. }) => {
                ProviderError::SchemaViolation {
                    template,
                    reason,
                    attempts,
                }
            }
            Some(other) => other,
            None => unreachable!("at least one attempt always runs"),
        })
    }
}

impl<G: Generator + ?Sized> Generator for std::sync::Arc<G> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, ProviderError> {
        (**self).generate(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::atomic::{AtomicU32, Ordering};

    /// Scripted backend: serves `payloads[min(attempt, last)]`, recording
    /// how many attempts were made.
    struct Scripted {
        payloads: Vec<Result<Value, ProviderError>>,
        calls: AtomicU32,
    }

    impl Scripted {
        fn new(payloads: Vec<Result<Value, ProviderError>>) -> Self {
            Scripted {
                payloads,
                calls: AtomicU32::new(0),
            }
        }
    }

    impl RawGenerator for Scripted {
        fn attempt(
            &self,
            _request: &GenerationRequest,
            attempt: u32,
        ) -> Result<GenerationResult, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let idx = (attempt as usize).min(self.payloads.len() - 1);
            match &self.payloads[idx] {
                Ok(payload) => Ok(GenerationResult {
                    payload: payload.clone(),
                    raw_text: payload.to_string(),
                    token_counts: TokenCounts::default(),
                }),
                Err(ProviderError::Transport { endpoint, message }) => {
                    Err(ProviderError::Transport {
                        endpoint: endpoint.clone(),
                        message: message.clone(),
                    })
                }
                Err(_) => panic!("only transport errors are scripted"),
            }
        }
    }

    fn narrate_request() -> GenerationRequest {
        GenerationRequest::new(PromptTemplateId::Narrate, 7).bind("case", "{}")
    }

    #[test]
    fn missing_binding_fails_before_any_attempt() {
        let gw = Gateway::new(Scripted::new(vec![Ok(json!({"narrative": "x"}))]));
        let err = gw
            .generate(&GenerationRequest::new(PromptTemplateId::Narrate, 7))
            .unwrap_err();
        assert!(matches!(err, ProviderError::MissingBinding { binding, .. } if binding == "case"));
        assert_eq!(gw.backend().calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn corrupt_then_valid_payload_succeeds_within_retry_budget() {
        let gw = Gateway::new(Scripted::new(vec![
            Ok(json!({"wrong_key": 1})),
            Ok(json!({"narrative": 42})),
            Ok(json!({"narrative": "fixed on third attempt"})),
        ]));
        let res = gw.generate(&narrate_request()).unwrap();
        assert_eq!(res.payload["narrative"], "fixed on third attempt");
        assert_eq!(gw.backend().calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn persistent_corruption_surfaces_schema_violation_with_attempt_count() {
        let gw = Gateway::new(Scripted::new(vec![Ok(json!({"nope": true}))]));
        let err = gw.generate(&narrate_request()).unwrap_err();
        match err {
            ProviderError::SchemaViolation { template, attempts, .. } => {
                assert_eq!(template, PromptTemplateId::Narrate);
                assert_eq!(attempts, MAX_GENERATION_RETRIES + 1);
            }
            other => panic!("expected schema violation, got {other}"),
        }
        assert_eq!(gw.backend().calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn transport_errors_are_retried_then_surfaced() {
        let boom = || {
            Err(ProviderError::Transport {
                endpoint: "mock://".into(),
                message: "connection reset".into(),
            })
        };
        let gw = Gateway::new(Scripted::new(vec![boom(), boom(), boom()]));
        let err = gw.generate(&narrate_request()).unwrap_err();
        assert!(matches!(err, ProviderError::Transport { .. }));
        assert_eq!(gw.backend().calls.load(Ordering::SeqCst), 3);

        let gw = Gateway::new(Scripted::new(vec![boom(), Ok(json!({"narrative": "ok"}))]));
        assert!(gw.generate(&narrate_request()).is_ok());
    }
}
