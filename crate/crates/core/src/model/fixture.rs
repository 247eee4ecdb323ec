//! Fingerprint-keyed fixtures and the record side of record/replay.
//!
//! A fixture file is a JSON object mapping request fingerprint to response
//! text. Recording writes the same format, so a recorded cache replays as a
//! fixture without touching the network.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{ChatRequest, ChatResponse, ModelBackend, ModelError};
use crate::memory::write_atomically;

#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    name: String,
    responses: BTreeMap<String, String>,
}

impl FixtureBackend {
    pub fn new(responses: BTreeMap<String, String>) -> Self {
        Self {
            name: "fixture".into(),
            responses,
        }
    }

    pub fn from_pairs<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (ChatRequest, String)>,
    {
        Self::new(pairs.into_iter().map(|(req, text)| (req.fingerprint(), text)).collect())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::FixtureFile(format!("{}: {e}", path.display())))?;
        let responses: BTreeMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| ModelError::FixtureFile(format!("{}: {e}", path.display())))?;
        Ok(Self {
            name: format!("fixture:{}", path.display()),
            responses,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ModelBackend for FixtureBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ModelError> {
        let fingerprint = request.fingerprint();
        match self.responses.get(&fingerprint) {
            Some(text) => Ok(ChatResponse {
                text: text.clone(),
                usage: None,
                backend: self.name.clone(),
            }),
            None => Err(ModelError::FixtureMiss {
                fingerprint,
                template_id: request.template_id.clone(),
            }),
        }
    }
}

/// Forwards to an inner backend and persists every response by fingerprint.
pub struct RecordingBackend {
    inner: Arc<dyn ModelBackend>,
    path: Option<PathBuf>,
    cache: Mutex<BTreeMap<String, String>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ModelBackend>) -> Self {
        Self {
            inner,
            path: None,
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    /// Writes the cache to `path` after every recorded call.
    pub fn persist_to(mut self, path: impl Into<PathBuf>) -> Self {
        self.path = Some(path.into());
        self
    }

    pub fn recorded(&self) -> BTreeMap<String, String> {
        self.cache.lock().unwrap().clone()
    }

    pub fn to_fixture(&self) -> FixtureBackend {
        FixtureBackend::new(self.recorded())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string_pretty(&*self.cache.lock().unwrap())
            .map_err(|e| ModelError::FixtureFile(e.to_string()))?;
        write_atomically(path, text.as_bytes()).map_err(|e| ModelError::FixtureFile(e.to_string()))
    }
}

impl ModelBackend for RecordingBackend {
    fn name(&self) -> &str {
        "record"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ModelError> {
        let response = self.inner.complete(request)?;
        self.cache
            .lock()
            .unwrap()
            .insert(request.fingerprint(), response.text.clone());
        if let Some(path) = &self.path {
            self.save(path)?;
        }
        Ok(response)
    }
}
