//! HTTP backend speaking a chat-completions dialect: one user message
//! carrying the image (base64) and the prompt text, plus sampling settings.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gateway::{Backend, WireRequest};
use crate::Result;

/// Environment variable holding the bearer token, if the server needs one.
/// The token never appears in provenance or logs.
pub const API_KEY_ENV: &str = "AOT_API_KEY";

const EXCERPT_LIMIT: usize = 200;

#[derive(Debug, Serialize)]
struct RequestBody<'a> {
    model: &'a str,
    messages: [Message<'a>; 1],
    temperature: f64,
    top_p: f64,
}

#[derive(Debug, Serialize)]
struct Message<'a> {
    role: &'static str,
    content: [ContentPart<'a>; 2],
}

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ContentPart<'a> {
    Image { data: String },
    Text { text: &'a str },
}

#[derive(Debug, Deserialize)]
struct ResponseBody {
    choices: Vec<ResponseChoice>,
}

#[derive(Debug, Deserialize)]
struct ResponseChoice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    content: String,
}

/// Backend that POSTs each request to a chat-completions endpoint.
pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl RemoteBackend {
    pub fn new(endpoint: String, timeout_ms: u64) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            // Status handling is ours: non-2xx must become protocol errors
            // with the status and a body excerpt, not a transport failure.
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend { agent, endpoint, api_key: std::env::var(API_KEY_ENV).ok() }
    }

    /// Serialize the wire body for one request. Exposed so tests can pin the
    /// exact shape the server sees.
    pub fn wire_body(request: &WireRequest<'_>) -> serde_json::Value {
        let body = RequestBody {
            model: request.model,
            messages: [Message {
                role: "user",
                content: [
                    ContentPart::Image {
                        data: base64::engine::general_purpose::STANDARD.encode(request.image_png),
                    },
                    ContentPart::Text { text: request.prompt_text },
                ],
            }],
            temperature: request.decoding.temperature,
            top_p: request.decoding.top_p,
        };
        serde_json::to_value(&body).expect("wire body serializes")
    }
}

fn excerpt(body: &str) -> String {
    let trimmed = body.trim();
    if trimmed.len() <= EXCERPT_LIMIT {
        return trimmed.to_string();
    }
    let mut end = EXCERPT_LIMIT;
    while !trimmed.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}…", &trimmed[..end])
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        "remote"
    }

    fn generate_once(&self, request: &WireRequest<'_>) -> Result<String> {
        let body = Self::wire_body(request);
        let mut post = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            post = post.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = post
            .send_json(&body)
            .map_err(|e| Error::Transport { fingerprint: None, msg: e.to_string() })?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(Error::Protocol { status, excerpt: excerpt(&text) });
        }
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport { fingerprint: None, msg: e.to_string() })?;
        let parsed: ResponseBody = serde_json::from_str(&text).map_err(|_| Error::Protocol {
            status,
            excerpt: excerpt(&text),
        })?;
        match parsed.choices.into_iter().next() {
            Some(choice) => Ok(choice.message.content),
            None => Err(Error::Protocol { status, excerpt: excerpt(&text) }),
        }
    }
}
