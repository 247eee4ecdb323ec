//! Newline-delimited JSON messages between the trainer and an executor.
//!
//! Requests:
//!
//! ```text
//! {"id":1,"op":"describe"}
//! {"id":2,"op":"reset"}
//! {"id":3,"op":"rollout","task_id":"t","seed":7,"skill":{"plan":["..."],"programs":["..."]}}
//! {"id":4,"op":"shutdown"}
//! ```
//!
//! Replies carry the request `id` and `ok`. A rollout reply adds `success`
//! (0 or 1), `step_boundaries` as `[step, first, last]` triples, `frames`,
//! `scene`, `halted_at_step` and `env_note`; a describe reply adds `name`,
//! `protocol_version` and `tasks`. Failures are `{"id":..,"ok":false,"error":".."}`.
//! Unknown fields are ignored in both directions.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{EnvDescription, EnvError, Environment, RolloutRecord, RolloutRequest, SceneDescription};
use crate::reflection::{StepBoundary, VideoRef};
use crate::skill::{Skill, SkillOrigin, TaskSpec};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_LINE_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("message is not valid UTF-8")]
    NonUtf8,
    #[error("message exceeds {limit} bytes")]
    Oversize { limit: usize },
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("unknown op `{op}`")]
    UnknownOp { id: Option<u64>, op: String },
    #[error("invalid message: {0}")]
    Invalid(String),
    #[error("stream error: {0}")]
    Io(String),
    #[error("connection closed")]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireSkill {
    pub plan: Vec<String>,
    pub programs: Vec<String>,
}

impl From<&Skill> for WireSkill {
    fn from(skill: &Skill) -> Self {
        Self {
            plan: skill.plan().iter().map(|d| d.as_str().to_string()).collect(),
            programs: skill.programs().iter().map(|p| p.text.clone()).collect(),
        }
    }
}

impl WireSkill {
    /// The executor side has no task description; the task id stands in for it.
    pub fn to_skill(&self, task_id: &str) -> Result<Skill, ProtocolError> {
        let task = TaskSpec::new(task_id, task_id).map_err(|e| ProtocolError::Invalid(e.to_string()))?;
        Skill::from_texts(&task, &self.plan, &self.programs, SkillOrigin::Planned)
            .map_err(|e| ProtocolError::Invalid(format!("skill: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Describe { id: u64 },
    Reset { id: u64 },
    Rollout { id: u64, task_id: String, seed: u64, skill: WireSkill },
    Shutdown { id: u64 },
}

impl Request {
    pub fn id(&self) -> u64 {
        match self {
            Request::Describe { id } | Request::Reset { id } | Request::Shutdown { id } | Request::Rollout { id, .. } => {
                *id
            }
        }
    }

    pub fn op(&self) -> &'static str {
        match self {
            Request::Describe { .. } => "describe",
            Request::Reset { .. } => "reset",
            Request::Rollout { .. } => "rollout",
            Request::Shutdown { .. } => "shutdown",
        }
    }

    pub fn rollout(id: u64, request: &RolloutRequest) -> Self {
        Request::Rollout {
            id,
            task_id: request.task_id.clone(),
            seed: request.seed,
            skill: WireSkill::from(&request.skill),
        }
    }

    /// The reply shape this request expects.
    pub fn reply_kind(&self) -> ReplyKind {
        match self {
            Request::Describe { .. } => ReplyKind::Describe,
            Request::Rollout { .. } => ReplyKind::Rollout,
            Request::Reset { .. } | Request::Shutdown { .. } => ReplyKind::Ack,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescribeReply {
    pub id: u64,
    pub ok: bool,
    pub name: String,
    pub protocol_version: u32,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReply {
    pub id: u64,
    pub ok: bool,
    pub success: u8,
    pub step_boundaries: Vec<StepBoundary>,
    pub frames: Vec<String>,
    pub scene: SceneDescription,
    pub halted_at_step: Option<usize>,
    pub env_note: String,
}

impl RolloutReply {
    pub fn from_record(id: u64, record: &RolloutRecord) -> Self {
        Self {
            id,
            ok: true,
            success: u8::from(record.success),
            step_boundaries: record.video.step_boundaries.clone(),
            frames: record.video.frames.clone(),
            scene: record.scene.clone(),
            halted_at_step: record.halted_at_step,
            env_note: record.env_note.clone(),
        }
    }

    pub fn into_record(self) -> Result<RolloutRecord, ProtocolError> {
        let success = match self.success {
            0 => false,
            1 => true,
            other => return Err(ProtocolError::Invalid(format!("success must be 0 or 1, got {other}"))),
        };
        Ok(RolloutRecord {
            success,
            video: VideoRef::new(self.frames, self.step_boundaries),
            scene: self.scene,
            halted_at_step: self.halted_at_step,
            env_note: self.env_note,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AckReply {
    pub id: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub id: u64,
    pub ok: bool,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyKind {
    Describe,
    Ack,
    Rollout,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Describe(DescribeReply),
    Ack(AckReply),
    Rollout(RolloutReply),
    Error(ErrorReply),
}

impl Reply {
    pub fn ack(id: u64) -> Self {
        Reply::Ack(AckReply { id, ok: true })
    }

    pub fn error(id: u64, error: impl Into<String>) -> Self {
        Reply::Error(ErrorReply {
            id,
            ok: false,
            error: error.into(),
        })
    }

    pub fn describe(id: u64, description: EnvDescription) -> Self {
        Reply::Describe(DescribeReply {
            id,
            ok: true,
            name: description.name,
            protocol_version: description.protocol_version,
            tasks: description.tasks,
        })
    }

    pub fn id(&self) -> u64 {
        match self {
            Reply::Describe(r) => r.id,
            Reply::Ack(r) => r.id,
            Reply::Rollout(r) => r.id,
            Reply::Error(r) => r.id,
        }
    }
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("protocol messages always serialize")
}

pub fn encode_request(request: &Request) -> String {
    to_line(request)
}

pub fn encode_reply(reply: &Reply) -> String {
    match reply {
        Reply::Describe(r) => to_line(r),
        Reply::Ack(r) => to_line(r),
        Reply::Rollout(r) => to_line(r),
        Reply::Error(r) => to_line(r),
    }
}

fn parse_object(line: &str) -> Result<serde_json::Map<String, Value>, ProtocolError> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ProtocolError::Invalid("message must be a JSON object".into())),
        Err(e) => Err(ProtocolError::Malformed(e.to_string())),
    }
}

fn typed<T: DeserializeOwned>(map: serde_json::Map<String, Value>) -> Result<T, ProtocolError> {
    serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            ProtocolError::Invalid(e.inner().to_string())
        } else {
            ProtocolError::Invalid(format!("{path}: {}", e.inner()))
        }
    })
}

/// The `id` of a message, if it has a numeric one.
pub fn peek_id(line: &str) -> Option<u64> {
    serde_json::from_str::<Value>(line).ok()?.get("id")?.as_u64()
}

pub fn decode_request(line: &str) -> Result<Request, ProtocolError> {
    let map = parse_object(line)?;
    let id = map.get("id").and_then(Value::as_u64);
    let op = match map.get("op") {
        Some(Value::String(op)) => op.clone(),
        Some(_) => return Err(ProtocolError::Invalid("`op` must be a string".into())),
        None => return Err(ProtocolError::Invalid("missing field `op`".into())),
    };
    if !matches!(op.as_str(), "describe" | "reset" | "rollout" | "shutdown") {
        return Err(ProtocolError::UnknownOp { id, op });
    }
    typed(map)
}

pub fn decode_reply(line: &str, expected: ReplyKind) -> Result<Reply, ProtocolError> {
    let map = parse_object(line)?;
    match map.get("ok") {
        Some(Value::Bool(false)) => return Ok(Reply::Error(typed(map)?)),
        Some(Value::Bool(true)) => {}
        Some(_) => return Err(ProtocolError::Invalid("`ok` must be a boolean".into())),
        None => return Err(ProtocolError::Invalid("missing field `ok`".into())),
    }
    Ok(match expected {
        ReplyKind::Describe => Reply::Describe(typed(map)?),
        ReplyKind::Ack => Reply::Ack(typed(map)?),
        ReplyKind::Rollout => {
            let reply: RolloutReply = typed(map)?;
            if reply.success > 1 {
                return Err(ProtocolError::Invalid(format!(
                    "success must be 0 or 1, got {}",
                    reply.success
                )));
            }
            Reply::Rollout(reply)
        }
    })
}

/// Reads one newline-terminated message. `Ok(None)` at end of stream.
/// An oversize line is consumed entirely before the error is returned so the
/// stream stays aligned on message boundaries.
pub fn read_frame<R: BufRead + ?Sized>(reader: &mut R, limit: usize) -> Result<Option<String>, ProtocolError> {
    let mut buf = Vec::new();
    let mut oversize = false;
    let mut saw_any = false;
    loop {
        let (consumed, done) = {
            let available = reader.fill_buf().map_err(|e| ProtocolError::Io(e.to_string()))?;
            if available.is_empty() {
                break;
            }
            saw_any = true;
            match available.iter().position(|&b| b == b'\n') {
                Some(pos) => {
                    if !oversize {
                        buf.extend_from_slice(&available[..pos]);
                    }
                    (pos + 1, true)
                }
                None => {
                    if !oversize {
                        buf.extend_from_slice(available);
                    }
                    (available.len(), false)
                }
            }
        };
        reader.consume(consumed);
        if buf.len() > limit {
            oversize = true;
            buf = Vec::new();
        }
        if done {
            break;
        }
    }
    if !saw_any {
        return Ok(None);
    }
    if oversize {
        return Err(ProtocolError::Oversize { limit });
    }
    if buf.last() == Some(&b'\r') {
        buf.pop();
    }
    String::from_utf8(buf).map(Some).map_err(|_| ProtocolError::NonUtf8)
}

pub fn write_frame<W: Write + ?Sized>(writer: &mut W, line: &str) -> std::io::Result<()> {
    writer.write_all(line.as_bytes())?;
    writer.write_all(b"\n")?;
    writer.flush()
}

/// Answers one request with `env`. Returns the reply and whether to stop serving.
pub fn handle(env: &mut dyn Environment, line: &str) -> (Reply, bool) {
    let request = match decode_request(line) {
        Ok(r) => r,
        Err(err) => {
            let id = match &err {
                ProtocolError::UnknownOp { id, .. } => id.unwrap_or(0),
                _ => peek_id(line).unwrap_or(0),
            };
            return (Reply::error(id, err.to_string()), false);
        }
    };
    let id = request.id();
    let failure = |err: EnvError| Reply::error(id, err.to_string());
    match request {
        Request::Describe { .. } => match env.describe() {
            Ok(d) => (Reply::describe(id, d), false),
            Err(e) => (failure(e), false),
        },
        Request::Reset { .. } => match env.reset() {
            Ok(()) => (Reply::ack(id), false),
            Err(e) => (failure(e), false),
        },
        Request::Rollout { task_id, seed, skill, .. } => {
            let skill = match skill.to_skill(&task_id) {
                Ok(s) => s,
                Err(e) => return (Reply::error(id, e.to_string()), false),
            };
            match env.rollout(&RolloutRequest::new(task_id, skill, seed)) {
                Ok(record) => (Reply::Rollout(RolloutReply::from_record(id, &record)), false),
                Err(e) => (failure(e), false),
            }
        }
        Request::Shutdown { .. } => match env.shutdown() {
            Ok(()) => (Reply::ack(id), true),
            Err(e) => (failure(e), true),
        },
    }
}

/// Serves `env` over a line stream until `shutdown` or end of input.
/// Malformed requests get an error reply and the loop continues.
pub fn serve<R: BufRead, W: Write>(env: &mut dyn Environment, mut reader: R, mut writer: W) -> std::io::Result<()> {
    loop {
        let line = match read_frame(&mut reader, MAX_LINE_BYTES) {
            Ok(Some(line)) => line,
            Ok(None) => return Ok(()),
            Err(ProtocolError::Io(message)) => return Err(std::io::Error::other(message)),
            Err(err) => {
                write_frame(&mut writer, &encode_reply(&Reply::error(0, err.to_string())))?;
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let (reply, stop) = handle(env, &line);
        write_frame(&mut writer, &encode_reply(&reply))?;
        if stop {
            return Ok(());
        }
    }
}
