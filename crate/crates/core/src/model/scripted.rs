use super::{ChatRequest, ChatResponse, ModelBackend, ModelError};

type Responder = dyn Fn(&ChatRequest) -> Option<String> + Send + Sync;

/// Deterministic backend driven by a pure function of the request.
///
/// A `None` from the responder surfaces as a fixture miss naming the fingerprint.
pub struct ScriptedBackend {
    name: String,
    responder: Box<Responder>,
}

impl ScriptedBackend {
    pub fn new<F>(name: impl Into<String>, responder: F) -> Self
    where
        F: Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            responder: Box::new(responder),
        }
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ModelError> {
        match (self.responder)(request) {
            Some(text) => Ok(ChatResponse {
                text,
                usage: None,
                backend: self.name.clone(),
            }),
            None => Err(ModelError::FixtureMiss {
                fingerprint: request.fingerprint(),
                template_id: request.template_id.clone(),
            }),
        }
    }
}
