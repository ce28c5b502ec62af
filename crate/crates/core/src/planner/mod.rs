//! Three-stage planning chain against a chat-style model endpoint.
//!
//! Stage one splits the prompt into objects, stage two expands it into a
//! scene description, stage three turns that into plan JSON. The first
//! fenced code block of the last response is the plan. Recorded responses
//! can be replayed offline, keyed by a digest of each request.

mod transport;

pub use transport::{request_digest, ChatTransport, HttpTransport, RecordingTransport, ReplayTransport};

use crate::plan::{parse_plan, validate_plan, PlanDocument};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use thiserror::Error;

pub const DEFAULT_RETRIES: usize = 2;
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;
pub const DEFAULT_ENDPOINT: &str = "http://localhost:8000/v1/chat/completions";
pub const DEFAULT_MODEL: &str = "default";

const DECOMPOSE: &str = include_str!("../../templates/decompose.txt");
const EXPAND: &str = include_str!("../../templates/expand.txt");
const EXTRACT: &str = include_str!("../../templates/extract.txt");

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("planner.context: {0} stage needs a nonempty context")]
    EmptyContext(Stage),
    #[error("planner.transport: {0}")]
    Transport(String),
    #[error("planner.response: {0}")]
    Response(String),
    #[error("planner.no-data: the {0} response has no fenced code block")]
    NoData(Stage),
    #[error("planner.fixture-miss: no recorded response for {stage} request {digest}")]
    FixtureMiss { stage: Stage, digest: String },
    #[error("planner.invalid: plan still invalid after {attempts} attempts\n{report}")]
    Invalid { attempts: usize, report: String },
    #[error("planner.io: {0}")]
    Io(#[from] std::io::Error),
}

impl PlannerError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::EmptyContext(_) => "planner.context",
            Self::Transport(_) => "planner.transport",
            Self::Response(_) => "planner.response",
            Self::NoData(_) => "planner.no-data",
            Self::FixtureMiss { .. } => "planner.fixture-miss",
            Self::Invalid { .. } => "planner.invalid",
            Self::Io(_) => "planner.io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Decompose,
    Expand,
    Extract,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Decompose, Stage::Expand, Stage::Extract];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Decompose => "decompose",
            Self::Expand => "expand",
            Self::Extract => "extract",
        }
    }

    /// The packaged system text.
    pub fn template(self) -> &'static str {
        match self {
            Self::Decompose => DECOMPOSE,
            Self::Expand => EXPAND,
            Self::Extract => EXTRACT,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|stage| stage.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub stage: Stage,
    pub system: String,
    pub user: String,
    /// Reserved; always empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    /// Replay recorded responses from this directory instead of the network.
    pub replay: Option<PathBuf>,
    pub retries: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_ENDPOINT.to_string(),
            model: DEFAULT_MODEL.to_string(),
            api_key: None,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            replay: None,
            retries: DEFAULT_RETRIES,
        }
    }
}

impl PlannerConfig {
    /// Defaults overridden by `PLANNER_ENDPOINT`, `PLANNER_MODEL` and
    /// `PLANNER_API_KEY`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let mut c = Self::default();
        if let Some(e) = var("PLANNER_ENDPOINT") {
            c.endpoint = e;
        }
        if let Some(m) = var("PLANNER_MODEL") {
            c.model = m;
        }
        c.api_key = var("PLANNER_API_KEY");
        c
    }

    /// Replay transport when a replay directory is set, HTTP otherwise.
    pub fn transport(&self) -> Box<dyn ChatTransport> {
        match &self.replay {
            Some(dir) => Box::new(ReplayTransport::new(dir.clone())),
            None => Box::new(HttpTransport::new(self)),
        }
    }
}

pub fn build_stage_prompt(stage: Stage, context: &str) -> Result<PromptPayload, PlannerError> {
    if context.trim().is_empty() {
        return Err(PlannerError::EmptyContext(stage));
    }
    Ok(PromptPayload {
        stage,
        system: stage.template().to_string(),
        user: context.to_string(),
        images: Vec::new(),
    })
}

/// Stage-two context: the original prompt and the stage-one answer.
pub fn expand_context(prompt: &str, objects: &str) -> String {
    format!("Prompt: {prompt}\n\nMain objects:\n{objects}")
}

/// Stage-three context for a retry: the description plus the rejection.
pub fn retry_context(description: &str, report: &str) -> String {
    format!(
        "{description}\n\n--- Rejected ---\nThe previous planning data was rejected:\n{report}\nReturn corrected planning data."
    )
}

/// Body of the first fenced code block, without the info string.
pub fn first_fenced_block(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let rest = &text[open + 3..];
    let body = &rest[rest.find('\n')? + 1..];
    let close = body.find("```")?;
    Some(&body[..close])
}

/// One request per call; `retries` extra attempts on transport failure.
fn ask(
    transport: &mut dyn ChatTransport,
    payload: &PromptPayload,
    retries: usize,
) -> Result<String, PlannerError> {
    let mut attempt = 0;
    loop {
        match transport.complete(payload) {
            Err(PlannerError::Transport(_)) if attempt < retries => attempt += 1,
            other => return other,
        }
    }
}

/// Runs the chain through `transport`. The result always validates with no
/// errors.
pub fn request_plan_with(
    transport: &mut dyn ChatTransport,
    retries: usize,
    user_prompt: &str,
) -> Result<PlanDocument, PlannerError> {
    let objects = ask(transport, &build_stage_prompt(Stage::Decompose, user_prompt)?, retries)?;
    let description = ask(
        transport,
        &build_stage_prompt(Stage::Expand, &expand_context(user_prompt, &objects))?,
        retries,
    )?;
    let mut context = description.clone();
    let mut report = String::new();
    for _ in 0..=retries {
        let answer = ask(transport, &build_stage_prompt(Stage::Extract, &context)?, retries)?;
        let block = first_fenced_block(&answer).ok_or(PlannerError::NoData(Stage::Extract))?;
        report = match parse_plan(block.as_bytes()) {
            Err(e) => format!("{e}\n"),
            Ok(doc) => {
                let findings = validate_plan(&doc);
                if !findings.has_errors() {
                    return Ok(doc);
                }
                findings.errors().map(|f| format!("{f}\n")).collect()
            }
        };
        context = retry_context(&description, &report);
    }
    Err(PlannerError::Invalid {
        attempts: retries + 1,
        report,
    })
}

pub fn request_plan(config: &PlannerConfig, user_prompt: &str) -> Result<PlanDocument, PlannerError> {
    let mut transport = config.transport();
    request_plan_with(transport.as_mut(), config.retries, user_prompt)
}

/// Runs the chain live and writes every response under `directory`.
pub fn record_fixture(
    config: &PlannerConfig,
    user_prompt: &str,
    directory: impl Into<PathBuf>,
) -> Result<PlanDocument, PlannerError> {
    let mut transport = RecordingTransport::new(HttpTransport::new(config), directory.into())?;
    request_plan_with(&mut transport, config.retries, user_prompt)
}
