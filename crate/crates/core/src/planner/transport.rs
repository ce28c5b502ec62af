use super::{PlannerConfig, PlannerError, PromptPayload, Stage};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::ErrorKind;
use std::path::PathBuf;
use std::time::Duration;

/// Sends one stage request and returns the assistant's text.
pub trait ChatTransport {
    fn complete(&mut self, payload: &PromptPayload) -> Result<String, PlannerError>;
}

#[derive(Serialize)]
struct Canonical<'a> {
    stage: Stage,
    system: &'a str,
    user: &'a str,
}

/// Hex SHA-256 of the compact JSON `{"stage", "system", "user"}`. The model
/// id is left out so fixtures survive a model change.
pub fn request_digest(payload: &PromptPayload) -> String {
    let canonical = Canonical {
        stage: payload.stage,
        system: &payload.system,
        user: &payload.user,
    };
    let bytes = serde_json::to_vec(&canonical).expect("payload serializes");
    hex::encode(Sha256::digest(bytes))
}

fn chat_body(model: &str, payload: &PromptPayload) -> String {
    serde_json::json!({
        "model": model,
        "messages": [
            {"role": "system", "content": payload.system},
            {"role": "user", "content": payload.user},
        ],
    })
    .to_string()
}

/// Assistant text of a chat response body. Accepts the `choices` layout and
/// the single `message` layout.
fn response_text(body: &str) -> Result<String, PlannerError> {
    let v: Value = serde_json::from_str(body).map_err(|e| PlannerError::Response(format!("body is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/message/content"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| PlannerError::Response("no message content in response".into()))
}

pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &PlannerConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            api_key: config.api_key.clone(),
        }
    }

    /// Raw response body.
    fn post(&self, payload: &PromptPayload) -> Result<String, PlannerError> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(chat_body(&self.model, payload))
            .map_err(|e| PlannerError::Transport(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| PlannerError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(PlannerError::Transport(format!("{}: HTTP {status}", self.endpoint)));
        }
        Ok(body)
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&mut self, payload: &PromptPayload) -> Result<String, PlannerError> {
        response_text(&self.post(payload)?)
    }
}

/// Serves responses from `<dir>/<digest>`. Never touches the network.
pub struct ReplayTransport {
    dir: PathBuf,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&mut self, payload: &PromptPayload) -> Result<String, PlannerError> {
        let digest = request_digest(payload);
        match fs::read_to_string(self.dir.join(&digest)) {
            Ok(body) => response_text(&body),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(PlannerError::FixtureMiss {
                stage: payload.stage,
                digest,
            }),
            Err(e) => Err(e.into()),
        }
    }
}

/// Forwards to HTTP and stores each successful response body for replay.
pub struct RecordingTransport {
    inner: HttpTransport,
    dir: PathBuf,
}

impl RecordingTransport {
    pub fn new(inner: HttpTransport, dir: PathBuf) -> Result<Self, PlannerError> {
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }
}

impl ChatTransport for RecordingTransport {
    fn complete(&mut self, payload: &PromptPayload) -> Result<String, PlannerError> {
        let body = self.inner.post(payload)?;
        let text = response_text(&body)?;
        fs::write(self.dir.join(request_digest(payload)), &body)?;
        Ok(text)
    }
}
