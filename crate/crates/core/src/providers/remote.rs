//! HTTP backends: a chat-completions generator, an embedding endpoint, and
//! a snippet-search knowledge source.
//!
//! These adapters exist so the same pipeline that runs offline against the
//! mocks can be pointed at hosted models; none of them are exercised by the
//! test suite beyond their pure request/response plumbing. All three speak
//! the ubiquitous OpenAI-compatible wire shapes.

use std::time::Duration;

use serde_json::{json, Value};

use crate::embed::{EmbedError, Embedder, UnitVec};
use crate::providers::knowledge::{KnowledgePurpose, KnowledgeSnippet, KnowledgeSource};
use crate::providers::templates::render_prompt;
use crate::providers::{
    GenerationRequest, GenerationResult, ProviderError, RawGenerator, TokenCounts,
};

fn build_client(timeout_secs: u64) -> Result<reqwest::blocking::Client, ProviderError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(timeout_secs))
        .build()
        .map_err(|e| ProviderError::Config(format!("http client: {e}")))
}

/// Strip a Markdown code fence (```json ... ```) if the model wrapped its
/// payload in one; otherwise return the trimmed text unchanged.
pub(crate) fn extract_json_block(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    let rest = rest.strip_prefix('\n').unwrap_or(rest);
    rest.strip_suffix("```").map(str::trim).unwrap_or(trimmed)
}

/// Chat-completions generation backend.
pub struct RemoteGenerator {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    client: reqwest::blocking::Client,
}

impl RemoteGenerator {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        temperature: f64,
        timeout_secs: u64,
    ) -> Result<Self, ProviderError> {
        Ok(RemoteGenerator {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            temperature,
            client: build_client(timeout_secs)?,
        })
    }

    fn transport(&self, message: impl Into<String>) -> ProviderError {
        ProviderError::Transport {
            endpoint: self.endpoint.clone(),
            message: message.into(),
        }
    }
}

impl RawGenerator for RemoteGenerator {
    fn attempt(
        &self,
        request: &GenerationRequest,
        attempt: u32,
    ) -> Result<GenerationResult, ProviderError> {
        let (system, user) = render_prompt(request.template, &request.bindings);
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.temperature,
            // Nudge the sampler on re-asks while staying reproducible.
            "seed": request.seed.wrapping_add(attempt as u64),
            "response_format": {"type": "json_object"},
        });
        let mut http = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http.send().map_err(|e| self.transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| self.transport(format!("read body: {e}")))?;
        if !status.is_success() {
            return Err(self.transport(format!("HTTP {status}: {text}")));
        }
        let envelope: Value = serde_json::from_str(&text)
            .map_err(|e| self.transport(format!("malformed envelope: {e}")))?;
        let content = envelope["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| self.transport("envelope missing choices[0].message.content"))?;
        // Non-JSON content is passed through as a bare string so the
        // gateway counts it as a schema violation (and re-asks) rather
        // than a transport failure.
        let payload = serde_json::from_str(extract_json_block(content))
            .unwrap_or_else(|_| Value::String(content.to_string()));
        Ok(GenerationResult {
            payload,
            raw_text: content.to_string(),
            token_counts: TokenCounts {
                prompt: envelope["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
                completion: envelope["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            },
        })
    }
}

/// Embedding-endpoint backend for the [`Embedder`] trait.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dim: usize,
        timeout_secs: u64,
    ) -> Result<Self, ProviderError> {
        Ok(RemoteEmbedder {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            dim,
            client: build_client(timeout_secs)?,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<UnitVec, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let body = json!({"model": self.model, "input": [text]});
        let mut http = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http
            .send()
            .map_err(|e| EmbedError::Backend(e.to_string()))?;
        let status = response.status();
        let envelope: Value = response
            .json()
            .map_err(|e| EmbedError::Backend(format!("malformed envelope: {e}")))?;
        if !status.is_success() {
            return Err(EmbedError::Backend(format!("HTTP {status}")));
        }
        let raw: Vec<f64> = envelope["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| EmbedError::Backend("envelope missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(f64::NAN))
            .collect();
        if raw.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: raw.len(),
            });
        }
        UnitVec::from_raw(raw)
    }
}

/// Snippet-search knowledge backend: GET `{endpoint}?disease=..&purpose=..`
/// returning a JSON array of snippets.
pub struct RemoteKnowledge {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl RemoteKnowledge {
    pub fn new(endpoint: impl Into<String>, timeout_secs: u64) -> Result<Self, ProviderError> {
        Ok(RemoteKnowledge {
            endpoint: endpoint.into(),
            client: build_client(timeout_secs)?,
        })
    }

    /// The exact URL a query hits (kept separate for testability).
    pub fn query_url(
        endpoint: &str,
        disease: &str,
        purpose: KnowledgePurpose,
    ) -> Result<String, ProviderError> {
        reqwest::Url::parse_with_params(
            endpoint,
            &[("disease", disease), ("purpose", purpose.name())],
        )
        .map(String::from)
        .map_err(|e| ProviderError::Config(format!("knowledge endpoint `{endpoint}`: {e}")))
    }
}

impl KnowledgeSource for RemoteKnowledge {
    fn search_knowledge(
        &self,
        disease: &str,
        purpose: KnowledgePurpose,
    ) -> Result<Vec<KnowledgeSnippet>, ProviderError> {
        let url = Self::query_url(&self.endpoint, disease, purpose)?;
        let transport = |message: String| ProviderError::Transport {
            endpoint: url.clone(),
            message,
        };
        let response = self
            .client
            .get(&url)
            .send()
            .map_err(|e| transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(transport(format!("HTTP {status}")));
        }
        response
            .json::<Vec<KnowledgeSnippet>>()
            .map_err(|e| transport(format!("malformed snippet list: {e}")))
    }
}
