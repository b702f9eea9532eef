//! Chat requests, the backend abstraction, and the HTTP chat-completions client.

mod http;
pub mod structured;
pub mod template;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpBackendConfig, API_KEY_ENV};
pub use structured::{
    parse_structured, AggregateBody, ParseError, PrincipleBatch, RouteBatch, RouteBody, StructuredBody,
    StructuredPayload,
};
pub use template::{detect_kind, render_template, CandidateBrief, EliteBrief, RenderError, Sampling, TemplateContext, TemplateKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

/// A single chat exchange. Images are attached to the first user message on
/// the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub image_refs: Vec<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// The same request with a follow-up asking for a schema-conforming reply.
    pub fn with_corrective_instruction(&self) -> ChatRequest {
        let mut req = self.clone();
        req.messages.push(ChatMessage {
            role: Role::User,
            text: CORRECTIVE_INSTRUCTION.to_string(),
        });
        req
    }
}

pub const CORRECTIVE_INSTRUCTION: &str = "Your previous reply could not be parsed. \
Reply again with only a JSON document that follows the output schema above exactly.";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub content: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint answered HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("malformed chat-completions payload: {0}")]
    Malformed(String),
    #[error("cannot attach image {0}")]
    Image(String),
}

/// Anything that can answer a chat request: the HTTP client, the bundled
/// deterministic mock, or a test double.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn chat(&self, req: &ChatRequest) -> Result<ChatReply, ClientError>;
}
