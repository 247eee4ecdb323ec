//! HTTP backend for chat-completion style endpoints.
//!
//! Configured from `MODEL_BASE_URL`, `MODEL_NAME_LLM`, `MODEL_NAME_VLM` and
//! `MODEL_API_KEY`. Never needed by the test suite.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{ChatRequest, ChatResponse, ModelBackend, ModelError, Role, TemplateSet, Usage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model_llm: String,
    pub model_vlm: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub timeout: Duration,
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn from_env() -> Result<Self, ModelError> {
        Self::from_lookup(|key| std::env::var(key).ok())
    }

    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ModelError> {
        let required = |key: &str| {
            lookup(key)
                .filter(|v| !v.is_empty())
                .ok_or_else(|| ModelError::InvalidRequest(format!("environment variable {key} is not set")))
        };
        let model_llm = required("MODEL_NAME_LLM")?;
        Ok(Self {
            base_url: required("MODEL_BASE_URL")?.trim_end_matches('/').to_string(),
            model_vlm: lookup("MODEL_NAME_VLM").filter(|v| !v.is_empty()).unwrap_or_else(|| model_llm.clone()),
            model_llm,
            api_key: lookup("MODEL_API_KEY").filter(|v| !v.is_empty()),
            max_retries: 3,
            timeout: Duration::from_secs(120),
            backoff: Duration::from_millis(500),
        })
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    templates: TemplateSet,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, templates: TemplateSet) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self {
            config,
            templates,
            agent,
        }
    }

    /// JSON body sent for `request`.
    pub fn request_body(&self, request: &ChatRequest) -> Result<Value, ModelError> {
        let prompt = self.templates.render(&request.template_id, &request.slots)?;
        let (model, content) = match request.role {
            Role::Llm => (&self.config.model_llm, Value::String(prompt)),
            Role::Vlm => {
                let mut parts = vec![json!({"type": "text", "text": prompt})];
                for frame in request.frames() {
                    parts.push(frame_part(frame));
                }
                (&self.config.model_vlm, Value::Array(parts))
            }
        };
        Ok(json!({
            "model": model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        }))
    }

    fn send_once(&self, body: &Value) -> Result<Value, ModelError> {
        let url = format!("{}/chat/completions", self.config.base_url);
        let mut call = self.agent.post(&url).set("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        match call.send_json(body.clone()) {
            Ok(response) => response.into_json::<Value>().map_err(|e| ModelError::Network {
                message: format!("unreadable response body: {e}"),
                retriable: false,
            }),
            Err(ureq::Error::Status(code, response)) => {
                let detail = response.into_string().unwrap_or_default();
                Err(ModelError::Network {
                    message: format!("HTTP {code}: {detail}"),
                    retriable: code == 429 || code >= 500,
                })
            }
            Err(ureq::Error::Transport(t)) => Err(ModelError::Network {
                message: t.to_string(),
                retriable: true,
            }),
        }
    }
}

fn frame_part(frame: &str) -> Value {
    if frame.starts_with("data:") || frame.starts_with("http://") || frame.starts_with("https://") {
        return json!({"type": "image_url", "image_url": {"url": frame}});
    }
    let path = Path::new(frame);
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Some("image/png"),
        Some("jpg") | Some("jpeg") => Some("image/jpeg"),
        Some("webp") => Some("image/webp"),
        _ => None,
    };
    match (mime, std::fs::read(path)) {
        (Some(mime), Ok(bytes)) => {
            let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
            json!({"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{encoded}")}})
        }
        // Synthetic frames are labels, not images.
        _ => json!({"type": "text", "text": format!("[frame {frame}]")}),
    }
}

impl ModelBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ModelError> {
        let body = self.request_body(request)?;
        let mut attempt = 0;
        let reply = loop {
            match self.send_once(&body) {
                Ok(reply) => break reply,
                Err(err) if err.is_retriable() && attempt < self.config.max_retries => {
                    attempt += 1;
                    tracing::warn!(attempt, error = %err, "retrying model call");
                    std::thread::sleep(self.config.backoff * 2u32.pow(attempt - 1));
                }
                Err(err) => return Err(err),
            }
        };
        let text = reply["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ModelError::Network {
                message: "response has no choices[0].message.content".into(),
                retriable: false,
            })?
            .to_string();
        let usage = reply.get("usage").map(|u| Usage {
            prompt_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
        });
        Ok(ChatResponse {
            text,
            usage,
            backend: format!("remote:{}", self.config.base_url),
        })
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    use super::*;

    fn config(base_url: String) -> RemoteConfig {
        RemoteConfig {
            base_url,
            model_llm: "text-model".into(),
            model_vlm: "vision-model".into(),
            api_key: Some("k".into()),
            max_retries: 2,
            timeout: Duration::from_secs(5),
            backoff: Duration::from_millis(1),
        }
    }

    /// Serves canned `(status, body)` replies, one per connection.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn config_from_lookup() {
        let cfg = RemoteConfig::from_lookup(|k| match k {
            "MODEL_BASE_URL" => Some("http://host/v1/".into()),
            "MODEL_NAME_LLM" => Some("m".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.base_url, "http://host/v1");
        assert_eq!(cfg.model_vlm, "m");
        assert!(cfg.api_key.is_none());
        assert!(RemoteConfig::from_lookup(|_| None).is_err());
    }

    #[test]
    fn vlm_body_attaches_frames() {
        let backend = RemoteBackend::new(config("http://unused".into()), TemplateSet::builtin());
        let req = ChatRequest::vlm("localize", vec!["data:image/png;base64,AA".into(), "label-3".into()])
            .slot("chunks", "chunk 0 | steps 0-1");
        let body = backend.request_body(&req).unwrap();
        assert_eq!(body["model"], "vision-model");
        let parts = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[1]["image_url"]["url"], "data:image/png;base64,AA");
        assert_eq!(parts[2]["text"], "[frame label-3]");
    }

    #[test]
    fn retries_transient_status_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"content":"composer(\"open gripper\")"}}],"usage":{"prompt_tokens":7,"completion_tokens":3}}"#;
        let (url, server) = serve(vec![(503, "{}".into()), (200, ok.into())]);
        let backend = RemoteBackend::new(config(url), TemplateSet::builtin());
        let response = backend
            .complete(&ChatRequest::llm("compose").slot("directive", "open gripper"))
            .unwrap();
        assert_eq!(response.text, "composer(\"open gripper\")");
        assert_eq!(response.usage.unwrap().prompt_tokens, 7);
        let bodies = server.join().unwrap();
        assert_eq!(bodies.len(), 2);
        assert!(bodies[1].contains("Directive: open gripper"));
    }

    #[test]
    fn client_error_is_not_retried() {
        let (url, server) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
        let backend = RemoteBackend::new(config(url), TemplateSet::builtin());
        let err = backend
            .complete(&ChatRequest::llm("compose").slot("directive", "x"))
            .unwrap_err();
        assert!(matches!(err, ModelError::Network { retriable: false, .. }), "{err}");
        assert_eq!(server.join().unwrap().len(), 1);
    }
}
