//! Uniform chat interface for the language-model (text) and vision-language
//! (text + frames) roles.
//!
//! Every call goes through a [`ModelClient`], which validates the request,
//! enforces the response cap and bumps exact per-(role, template) counters.
//! Those counters back every zero-inference assertion in the crate.

mod fixture;
mod remote;
mod scripted;
pub mod templates;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use fixture::{FixtureBackend, RecordingBackend};
pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::ScriptedBackend;
pub use templates::{TemplateError, TemplateSet};

pub const DEFAULT_RESPONSE_CAP: usize = 1 << 20;

/// Template ids understood by the pipeline.
pub mod template_ids {
    pub const PLAN: &str = "plan";
    pub const REGENERATE: &str = "regenerate";
    pub const COMPOSE: &str = "compose";
    pub const SUMMARIZE: &str = "summarize";
    pub const LOCALIZE: &str = "localize";
    pub const DIAGNOSE: &str = "diagnose";
    pub const LOGICAL_REFLECT: &str = "logical_reflect";
    pub const REPLAN_EXECUTION: &str = "replan_execution";
    pub const REPLAN_LOGICAL: &str = "replan_logical";

    pub const ALL: [&str; 9] = [
        PLAN,
        REGENERATE,
        COMPOSE,
        SUMMARIZE,
        LOCALIZE,
        DIAGNOSE,
        LOGICAL_REFLECT,
        REPLAN_EXECUTION,
        REPLAN_LOGICAL,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Llm,
    Vlm,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Llm => "llm",
            Role::Vlm => "vlm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub role: Role,
    pub template_id: String,
    pub slots: BTreeMap<String, String>,
    pub frames: Option<Vec<String>>,
}

impl ChatRequest {
    pub fn llm(template_id: &str) -> Self {
        Self {
            role: Role::Llm,
            template_id: template_id.to_string(),
            slots: BTreeMap::new(),
            frames: None,
        }
    }

    pub fn vlm(template_id: &str, frames: Vec<String>) -> Self {
        Self {
            role: Role::Vlm,
            template_id: template_id.to_string(),
            slots: BTreeMap::new(),
            frames: Some(frames),
        }
    }

    pub fn slot(mut self, key: &str, value: impl Into<String>) -> Self {
        self.slots.insert(key.to_string(), value.into());
        self
    }

    pub fn slot_value(&self, key: &str) -> Option<&str> {
        self.slots.get(key).map(String::as_str)
    }

    pub fn frames(&self) -> &[String] {
        self.frames.as_deref().unwrap_or(&[])
    }

    /// Stable hash of role, template id, sorted slots and frame references.
    ///
    /// Inline `data:` frames contribute only a placeholder, never their bytes.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            role: Role,
            template_id: &'a str,
            slots: &'a BTreeMap<String, String>,
            frame_count: usize,
            frame_refs: Vec<&'a str>,
        }
        let frames = self.frames();
        let canonical = Canonical {
            role: self.role,
            template_id: &self.template_id,
            slots: &self.slots,
            frame_count: frames.len(),
            frame_refs: frames
                .iter()
                .map(|f| if f.starts_with("data:") { "<inline>" } else { f.as_str() })
                .collect(),
        };
        let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..16])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
    pub backend: String,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no fixture response for template `{template_id}` (fingerprint {fingerprint})")]
    FixtureMiss { fingerprint: String, template_id: String },
    #[error("network failure: {message}")]
    Network { message: String, retriable: bool },
    #[error("response of {size} bytes exceeds cap of {cap} bytes")]
    ResponseTooLarge { size: usize, cap: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("fixture file error: {0}")]
    FixtureFile(String),
}

impl ModelError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ModelError::Network { retriable: true, .. })
    }
}

pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ModelError>;
}

/// One logged model interaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub role: Role,
    pub template_id: String,
    pub fingerprint: String,
    pub response: String,
}

/// Shared call counters and interaction log.
#[derive(Debug, Default)]
pub struct CallLog {
    counts: Mutex<BTreeMap<(Role, String), u64>>,
    interactions: Mutex<Vec<Interaction>>,
}

impl CallLog {
    pub fn count(&self, role: Role, template_id: &str) -> u64 {
        self.counts
            .lock()
            .unwrap()
            .get(&(role, template_id.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn counts(&self) -> BTreeMap<(Role, String), u64> {
        self.counts.lock().unwrap().clone()
    }

    /// Calls per template id summed over roles.
    pub fn by_template(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for ((_, template), n) in self.counts.lock().unwrap().iter() {
            *out.entry(template.clone()).or_insert(0) += n;
        }
        out
    }

    pub fn total(&self) -> u64 {
        self.counts.lock().unwrap().values().sum()
    }

    pub fn interactions(&self) -> Vec<Interaction> {
        self.interactions.lock().unwrap().clone()
    }

    fn record(&self, request: &ChatRequest, fingerprint: String, response: Option<&str>) {
        *self
            .counts
            .lock()
            .unwrap()
            .entry((request.role, request.template_id.clone()))
            .or_insert(0) += 1;
        if let Some(text) = response {
            self.interactions.lock().unwrap().push(Interaction {
                role: request.role,
                template_id: request.template_id.clone(),
                fingerprint,
                response: text.to_string(),
            });
        }
    }
}

/// A role-bound handle to a backend. Cheap to clone; clones share counters.
#[derive(Clone)]
pub struct ModelClient {
    role: Role,
    backend: Arc<dyn ModelBackend>,
    log: Arc<CallLog>,
    response_cap: usize,
}

impl fmt::Debug for ModelClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelClient")
            .field("role", &self.role)
            .field("backend", &self.backend.name())
            .finish()
    }
}

impl ModelClient {
    pub fn new(role: Role, backend: Arc<dyn ModelBackend>, log: Arc<CallLog>) -> Self {
        Self {
            role,
            backend,
            log,
            response_cap: DEFAULT_RESPONSE_CAP,
        }
    }

    pub fn with_response_cap(mut self, cap: usize) -> Self {
        self.response_cap = cap;
        self
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.log
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Issues one call. The counter is bumped even when the backend fails.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ModelError> {
        if request.role != self.role {
            return Err(ModelError::InvalidRequest(format!(
                "{} request sent to {} client",
                request.role, self.role
            )));
        }
        if !template_ids::ALL.contains(&request.template_id.as_str()) {
            return Err(ModelError::InvalidRequest(format!(
                "unknown template id `{}`",
                request.template_id
            )));
        }
        if request.role == Role::Llm && request.frames.is_some() {
            return Err(ModelError::InvalidRequest("frames are only accepted by the vlm role".into()));
        }
        let fingerprint = request.fingerprint();
        let result = self.backend.complete(request).and_then(|response| {
            if response.text.len() > self.response_cap {
                Err(ModelError::ResponseTooLarge {
                    size: response.text.len(),
                    cap: self.response_cap,
                })
            } else {
                Ok(response)
            }
        });
        self.log
            .record(request, fingerprint, result.as_ref().ok().map(|r| r.text.as_str()));
        result
    }
}

/// The pair of clients the pipeline talks to, sharing one call log.
#[derive(Clone, Debug)]
pub struct Clients {
    pub llm: ModelClient,
    pub vlm: ModelClient,
}

impl Clients {
    pub fn new(llm: Arc<dyn ModelBackend>, vlm: Arc<dyn ModelBackend>) -> Self {
        let log = Arc::new(CallLog::default());
        Self {
            llm: ModelClient::new(Role::Llm, llm, log.clone()),
            vlm: ModelClient::new(Role::Vlm, vlm, log),
        }
    }

    /// Both roles served by one backend.
    pub fn shared(backend: Arc<dyn ModelBackend>) -> Self {
        Self::new(backend.clone(), backend)
    }

    pub fn log(&self) -> &Arc<CallLog> {
        self.llm.log()
    }

    pub fn total_calls(&self) -> u64 {
        self.log().total()
    }
}
