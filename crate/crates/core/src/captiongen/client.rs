//! Chat-completions transport: the OpenAI-compatible wire types, an HTTP
//! client, and an in-process deterministic stub for offline runs.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::prompts::{self, StubInput};

/// Environment variable holding the bearer token for the LLM endpoint.
pub const API_KEY_ENV: &str = "PLP_LLM_API_KEY";

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub response_format: ResponseFormat,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ResponseFormat {
    #[serde(rename = "type")]
    pub kind: String,
}

impl ResponseFormat {
    pub fn json_object() -> Self {
        Self { kind: "json_object".into() }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Message {
    pub role: String,
    pub content: MessageContent,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ImageUrl {
    pub url: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: MessageContent::Text(text.into()),
        }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: MessageContent::Text(text.into()),
        }
    }

    pub fn user_with_image(text: impl Into<String>, data_url: String) -> Self {
        Self {
            role: "user".into(),
            content: MessageContent::Parts(vec![
                ContentPart::Text { text: text.into() },
                ContentPart::ImageUrl {
                    image_url: ImageUrl { url: data_url },
                },
            ]),
        }
    }

    /// Concatenated text parts.
    pub fn text(&self) -> String {
        match &self.content {
            MessageContent::Text(t) => t.clone(),
            MessageContent::Parts(parts) => parts
                .iter()
                .filter_map(|p| match p {
                    ContentPart::Text { text } => Some(text.as_str()),
                    ContentPart::ImageUrl { .. } => None,
                })
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct ChatReply {
    pub content: Option<String>,
    #[serde(default)]
    pub refusal: Option<String>,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

impl ChatReply {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: Some(content.into()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("unreadable response: {0}")]
    Decode(String),
}

impl TransportError {
    /// Whether a retry has a chance of succeeding.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Network(_) => true,
            TransportError::Decode(_) => false,
        }
    }
}

/// Anything that can answer a chat-completions request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, TransportError>;
}

impl<F> ChatBackend for F
where
    F: Fn(&ChatRequest) -> Result<ChatReply, TransportError> + Send + Sync,
{
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, TransportError> {
        self(req)
    }
}

/// Blocking client for `POST {base_url}/chat/completions`.
pub struct HttpChatClient {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: ChatReplyMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    refusal: Option<String>,
}

impl HttpChatClient {
    pub fn new(base_url: &str, api_key: String, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, TransportError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(req)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status, body });
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&body).map_err(|e| TransportError::Decode(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Decode("response has no choices".into()))?;
        Ok(ChatReply {
            content: choice.message.content,
            refusal: choice.message.refusal,
            finish_reason: choice.finish_reason,
        })
    }
}

/// Deterministic offline stand-in for an LLM endpoint.
///
/// Reads the machine-readable `INPUT:` line that both prompt templates carry
/// and answers with well-formed JSON. Captions name the class label;
/// counterfactuals name the supplied other labels, cycling through a few
/// phrasings so that repeated labels still give distinct captions.
#[derive(Debug, Clone, Default)]
pub struct StubChat;

const STUB_PHRASES: [&str; 6] = [
    "A clear photograph showing {x} in natural light.",
    "A close-up photo of {x} seen from above.",
    "A detailed picture of {x} against a plain background.",
    "A snapshot of {x} in an everyday setting.",
    "A centered image of {x} with soft shadows.",
    "A sharp photo of {x} taken outdoors.",
];

impl ChatBackend for StubChat {
    fn complete(&self, req: &ChatRequest) -> Result<ChatReply, TransportError> {
        let text = req.messages.last().map(Message::text).unwrap_or_default();
        let input = prompts::find_stub_input(&text)
            .ok_or_else(|| TransportError::Status {
                status: 400,
                body: "stub endpoint: prompt has no INPUT line".into(),
            })?;
        let body = match input {
            StubInput::Caption { class_label } => {
                json!({ "caption": STUB_PHRASES[0].replace("{x}", &class_label) })
            }
            StubInput::Counterfactuals { class_label, other_labels, n } => {
                let pool: Vec<String> = if other_labels.is_empty() {
                    vec![format!("something resembling {class_label}")]
                } else {
                    other_labels
                };
                let caps: Vec<String> = (0..n)
                    .map(|i| {
                        let label = &pool[i % pool.len()];
                        let phrase = STUB_PHRASES[(i / pool.len()) % STUB_PHRASES.len()];
                        let mut cap = phrase.replace("{x}", label);
                        if i >= pool.len() * STUB_PHRASES.len() {
                            cap = format!("{cap} Variant {i}.");
                        }
                        cap
                    })
                    .collect();
                json!({ "counterfactuals": caps })
            }
        };
        Ok(ChatReply::text(body.to_string()))
    }
}
