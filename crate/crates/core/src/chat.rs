//! Chat-completion client shared by the generator, reviewer and comparator,
//! plus the versioned prompt templates they render.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ProviderError;
use crate::transport::{api_key, HttpTransport, JsonTransport, Limiter, RetryPolicy};

pub const LLM_API_KEY_VAR: &str = "UPCS_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatBackend {
    #[default]
    Mock,
    Remote,
}

/// Settings for a chat-completion-backed provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChatProviderConfig {
    pub backend: ChatBackend,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Extra attempts after an unparseable completion.
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// Overrides the pipeline seed for the mock backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ChatProviderConfig {
    fn default() -> Self {
        ChatProviderConfig {
            backend: ChatBackend::Mock,
            endpoint: String::new(),
            model: String::new(),
            temperature: 0.7,
            max_retries: 2,
            timeout_secs: 60,
            seed: None,
        }
    }
}

impl ChatProviderConfig {
    pub fn client(&self, max_in_flight: usize) -> Result<ChatClient, ProviderError> {
        let transport = HttpTransport::new(Duration::from_secs(self.timeout_secs))?;
        Ok(ChatClient::new(
            Arc::new(transport),
            self.endpoint.clone(),
            self.model.clone(),
            self.temperature,
            Some(api_key(LLM_API_KEY_VAR)?),
            max_in_flight,
        ))
    }
}

/// `{"model","messages":[{"role","content"}],"temperature"}` →
/// `{"choices":[{"message":{"content"}}]}`.
pub struct ChatClient {
    transport: Arc<dyn JsonTransport>,
    endpoint: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl ChatClient {
    pub fn new(
        transport: Arc<dyn JsonTransport>,
        endpoint: String,
        model: String,
        temperature: f64,
        api_key: Option<String>,
        max_in_flight: usize,
    ) -> Self {
        ChatClient {
            transport,
            endpoint,
            model,
            temperature,
            api_key,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(max_in_flight),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        });
        let response = {
            let _permit = self.limiter.acquire();
            self.retry.run(|| {
                self.transport
                    .post_json(&self.endpoint, self.api_key.as_deref(), &body)
            })?
        };
        response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                ProviderError::Validation("response missing choices[0].message.content".into())
            })
    }

    /// Completes `prompt` and parses it, re-asking up to `max_retries` extra
    /// times when parsing fails. The last raw completion is attached to the
    /// error.
    pub fn complete_parsed<T>(
        &self,
        prompt: &str,
        max_retries: u32,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, ProviderError> {
        let mut last = None;
        for _ in 0..=max_retries {
            let raw = self.complete(prompt)?;
            match parse(&raw) {
                Ok(v) => return Ok(v),
                Err(message) => last = Some((message, raw)),
            }
        }
        let (message, raw) = last.expect("at least one attempt");
        Err(ProviderError::Generation { message, raw })
    }
}

/// Extracts the JSON object inside the first ``` fence (an optional
/// language tag after the opening fence is ignored).
pub fn extract_fenced_json(completion: &str) -> Result<serde_json::Map<String, Value>, String> {
    let start = completion
        .find("```")
        .ok_or_else(|| "completion has no fenced block".to_string())?;
    let after = &completion[start + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let end = body
        .find("```")
        .ok_or_else(|| "fenced block is not closed".to_string())?;
    match serde_json::from_str::<Value>(body[..end].trim()) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err("fenced block is not a JSON object".into()),
        Err(e) => Err(format!("fenced block is not valid JSON: {e}")),
    }
}

/// A prompt template with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

impl PromptTemplate {
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.body.clone();
        for (k, v) in vars {
            out = out.replace(&format!("{{{{{k}}}}}"), v);
        }
        out
    }
}

/// The four prompt templates the pipeline uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub description: PromptTemplate,
    pub persona: PromptTemplate,
    pub review: PromptTemplate,
    pub compare: PromptTemplate,
}

const NAMES: [&str; 4] = ["description", "persona", "review", "compare"];
pub const PROMPT_VERSION: &str = "v1";

impl PromptSet {
    pub fn bundled() -> Self {
        let t = |name: &str, body: &str| PromptTemplate {
            name: format!("{name}.{PROMPT_VERSION}"),
            body: body.to_string(),
        };
        PromptSet {
            description: t(
                "description",
                include_str!("../data/prompts/description.v1.txt"),
            ),
            persona: t("persona", include_str!("../data/prompts/persona.v1.txt")),
            review: t("review", include_str!("../data/prompts/review.v1.txt")),
            compare: t("compare", include_str!("../data/prompts/compare.v1.txt")),
        }
    }

    /// Loads `<name>.v1.txt` for each template from `dir`.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut bodies = Vec::with_capacity(4);
        for name in NAMES {
            let file = format!("{name}.{PROMPT_VERSION}.txt");
            let body = std::fs::read_to_string(dir.join(&file))?;
            bodies.push(PromptTemplate {
                name: format!("{name}.{PROMPT_VERSION}"),
                body,
            });
        }
        let mut it = bodies.into_iter();
        Ok(PromptSet {
            description: it.next().unwrap(),
            persona: it.next().unwrap(),
            review: it.next().unwrap(),
            compare: it.next().unwrap(),
        })
    }
}
