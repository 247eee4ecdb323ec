//! Executing skills in an environment.
//!
//! An [`Environment`] turns a skill into a [`RolloutRecord`]: a binary success
//! bit, the execution video with per-step frame boundaries, the scene and a
//! free-form note. Environments run in process (see [`crate::suite`]) or
//! behind the JSON-lines wire protocol in [`protocol`] over a child process or
//! a TCP connection ([`transport`]).

pub mod protocol;
pub mod transport;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use protocol::{ProtocolError, MAX_LINE_BYTES, PROTOCOL_VERSION};
pub use transport::WireEnvironment;

use crate::reflection::VideoRef;
use crate::skill::{Skill, TaskSpec};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_TRANSPORT_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("executor rejected the request: {0}")]
    Rejected(String),
}

impl EnvError {
    /// Transport and timeout failures say nothing about the skill and may be retried.
    pub fn is_transport(&self) -> bool {
        matches!(self, EnvError::Transport(_) | EnvError::Timeout(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub position: [f64; 3],
    pub scale: [f64; 3],
}

impl SceneObject {
    pub fn new(name: impl Into<String>, position: [f64; 3], scale: [f64; 3]) -> Self {
        Self {
            name: name.into(),
            position,
            scale,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub objects: Vec<SceneObject>,
}

impl SceneDescription {
    pub fn new(objects: Vec<SceneObject>) -> Self {
        Self { objects }
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut names = BTreeSet::new();
        for obj in &self.objects {
            if !names.insert(obj.name.as_str()) {
                return Err(format!("duplicate scene object `{}`", obj.name));
            }
            if obj.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(format!("scene object `{}` has a non-positive scale", obj.name));
            }
            if obj.position.iter().any(|p| !p.is_finite()) {
                return Err(format!("scene object `{}` has a non-finite position", obj.name));
            }
        }
        Ok(())
    }

    /// Prompt form: one object per line with position and size in meters.
    pub fn render(&self) -> String {
        if self.objects.is_empty() {
            return "(no objects reported)".to_string();
        }
        self.objects
            .iter()
            .map(|o| {
                let [x, y, z] = o.position;
                let [sx, sy, sz] = o.scale;
                format!("- {}: position ({x:.3}, {y:.3}, {z:.3}), size ({sx:.3}, {sy:.3}, {sz:.3})", o.name)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRequest {
    pub task_id: String,
    pub skill: Skill,
    pub seed: u64,
}

impl RolloutRequest {
    pub fn new(task_id: impl Into<String>, skill: Skill, seed: u64) -> Self {
        Self {
            task_id: task_id.into(),
            skill,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub success: bool,
    pub video: VideoRef,
    pub scene: SceneDescription,
    pub halted_at_step: Option<usize>,
    pub env_note: String,
}

impl RolloutRecord {
    /// Checks the record against the plan it executed.
    pub fn validate(&self, plan_len: usize) -> Result<(), String> {
        self.video.validate().map_err(|e| e.to_string())?;
        if self.video.step_boundaries.len() > plan_len {
            return Err(format!(
                "{} step boundaries for a {plan_len}-step plan",
                self.video.step_boundaries.len()
            ));
        }
        if let Some(step) = self.halted_at_step {
            if self.success {
                return Err("a halted rollout cannot succeed".into());
            }
            if step >= plan_len {
                return Err(format!("halted at step {step} of a {plan_len}-step plan"));
            }
        }
        self.scene.validate()
    }

    pub fn summary(&self) -> RolloutSummary {
        RolloutSummary {
            success: self.success,
            steps_executed: self.video.executed_steps(),
            frames: self.video.len(),
            halted_at_step: self.halted_at_step,
            env_note: self.env_note.clone(),
        }
    }
}

/// What the training log keeps of a rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub success: bool,
    pub steps_executed: usize,
    pub frames: usize,
    pub halted_at_step: Option<usize>,
    pub env_note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvDescription {
    pub name: String,
    pub protocol_version: u32,
    pub tasks: Vec<TaskSpec>,
}

pub trait Environment: Send {
    fn describe(&mut self) -> Result<EnvDescription, EnvError>;
    fn reset(&mut self) -> Result<(), EnvError>;
    fn rollout(&mut self, request: &RolloutRequest) -> Result<RolloutRecord, EnvError>;
    fn shutdown(&mut self) -> Result<(), EnvError>;
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn describe(&mut self) -> Result<EnvDescription, EnvError> {
        (**self).describe()
    }
    fn reset(&mut self) -> Result<(), EnvError> {
        (**self).reset()
    }
    fn rollout(&mut self, request: &RolloutRequest) -> Result<RolloutRecord, EnvError> {
        (**self).rollout(request)
    }
    fn shutdown(&mut self) -> Result<(), EnvError> {
        (**self).shutdown()
    }
}

/// Runs one rollout, retrying transport failures up to `max_retries` times.
/// Returns the record and the number of retries spent.
pub fn rollout_with_retry(
    env: &mut dyn Environment,
    request: &RolloutRequest,
    max_retries: u32,
) -> Result<(RolloutRecord, u32), EnvError> {
    let mut retries = 0;
    loop {
        match env.rollout(request) {
            Ok(record) => return Ok((record, retries)),
            Err(err) if err.is_transport() && retries < max_retries => {
                retries += 1;
                tracing::warn!(task = %request.task_id, retries, error = %err, "retrying rollout");
            }
            Err(err) => return Err(err),
        }
    }
}

/// Where an environment lives: `builtin:<name>`, `cmd:<command line>` or `tcp:<host:port>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EnvSpec {
    Builtin(String),
    Command(String),
    Tcp(String),
}

impl FromStr for EnvSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("environment `{s}` must look like builtin:<name>, cmd:<command> or tcp:<host:port>"))?;
        if rest.trim().is_empty() {
            return Err(format!("environment `{s}` is missing its target after `{kind}:`"));
        }
        match kind {
            "builtin" => Ok(EnvSpec::Builtin(rest.to_string())),
            "cmd" => Ok(EnvSpec::Command(rest.to_string())),
            "tcp" => Ok(EnvSpec::Tcp(rest.to_string())),
            other => Err(format!("unknown environment kind `{other}` (expected builtin, cmd or tcp)")),
        }
    }
}

impl TryFrom<String> for EnvSpec {
    type Error = String;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<EnvSpec> for String {
    fn from(spec: EnvSpec) -> Self {
        spec.to_string()
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvSpec::Builtin(name) => write!(f, "builtin:{name}"),
            EnvSpec::Command(cmd) => write!(f, "cmd:{cmd}"),
            EnvSpec::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

impl EnvSpec {
    /// Opens an external environment; builtin names are resolved by [`crate::suite`].
    pub fn open_external(&self, timeout: Duration) -> Result<WireEnvironment, EnvError> {
        match self {
            EnvSpec::Command(cmd) => WireEnvironment::spawn(cmd, timeout),
            EnvSpec::Tcp(addr) => WireEnvironment::connect(addr, timeout),
            EnvSpec::Builtin(name) => Err(EnvError::Transport(format!(
                "builtin:{name} is not an external environment"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_spec_parsing() {
        assert_eq!("builtin:deterministic".parse(), Ok(EnvSpec::Builtin("deterministic".into())));
        assert_eq!(
            "cmd:python3 adapter.py --x".parse(),
            Ok(EnvSpec::Command("python3 adapter.py --x".into()))
        );
        assert_eq!("tcp:127.0.0.1:9000".parse(), Ok(EnvSpec::Tcp("127.0.0.1:9000".into())));
        assert!("ftp:x".parse::<EnvSpec>().is_err());
        assert!("cmd:".parse::<EnvSpec>().is_err());
        assert!("deterministic".parse::<EnvSpec>().is_err());
        let spec = EnvSpec::Tcp("h:1".into());
        assert_eq!(spec.to_string().parse::<EnvSpec>().unwrap(), spec);
    }

    #[test]
    fn scene_validation() {
        let ok = SceneDescription::new(vec![SceneObject::new("a", [0.0; 3], [0.1; 3])]);
        assert!(ok.validate().is_ok());
        let dup = SceneDescription::new(vec![ok.objects[0].clone(), ok.objects[0].clone()]);
        assert!(dup.validate().is_err());
        let flat = SceneDescription::new(vec![SceneObject::new("a", [0.0; 3], [0.1, 0.0, 0.1])]);
        assert!(flat.validate().is_err());
        assert!(ok.render().contains("- a: position (0.000, 0.000, 0.000), size (0.100, 0.100, 0.100)"));
    }
}
