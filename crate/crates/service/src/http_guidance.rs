//! Guidance backend that forwards both turns to a model server.
//!
//! Request body (POST to the endpoint):
//! `{"image_png": <base64>, "messages": [{"role","content"}...], "brief": "..."}`
//! where `messages` follows the training conversation layout up to the turn
//! being asked for. The server answers `{"text": "..."}` with grounding text.

use std::time::Duration;

use base64::Engine;
use facade_core::dataset::{Message, Role};
use facade_core::guidance::{
    GuidanceBackend, GuidanceError, DETECT_INSTRUCTION, PROPOSE_INSTRUCTION,
};
use facade_core::SketchImage;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize)]
pub struct TurnRequest<'a> {
    pub image_png: String,
    pub messages: Vec<Message>,
    pub brief: &'a str,
}

#[derive(Debug, Deserialize)]
pub struct TurnResponse {
    pub text: String,
}

pub struct HttpGuidance {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpGuidance {
    pub fn new(endpoint: String, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client builds without TLS configuration");
        Self { endpoint, client }
    }

    fn ask(
        &self,
        sketch: &SketchImage,
        messages: Vec<Message>,
        brief: &str,
    ) -> Result<String, GuidanceError> {
        let body = TurnRequest {
            image_png: base64::engine::general_purpose::STANDARD.encode(sketch.to_png()),
            messages,
            brief,
        };
        let backend = |e: reqwest::Error| GuidanceError::Backend(format!("{}: {e}", self.endpoint));
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(backend)?
            .error_for_status()
            .map_err(backend)?;
        Ok(resp.json::<TurnResponse>().map_err(backend)?.text)
    }
}

fn user(content: &str) -> Message {
    Message {
        role: Role::User,
        content: content.to_string(),
    }
}

impl GuidanceBackend for HttpGuidance {
    fn id(&self) -> &str {
        "http"
    }

    fn detect(&self, sketch: &SketchImage) -> Result<String, GuidanceError> {
        self.ask(sketch, vec![user(DETECT_INSTRUCTION)], "")
    }

    fn propose(
        &self,
        sketch: &SketchImage,
        detection_text: &str,
        brief: &str,
    ) -> Result<String, GuidanceError> {
        let messages = vec![
            user(DETECT_INSTRUCTION),
            Message {
                role: Role::Assistant,
                content: detection_text.to_string(),
            },
            user(PROPOSE_INSTRUCTION),
        ];
        self.ask(sketch, messages, brief)
    }

    fn is_stateless(&self) -> bool {
        true
    }
}
