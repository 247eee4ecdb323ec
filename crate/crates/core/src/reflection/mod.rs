//! Failure reflection over execution videos.
//!
//! A failed rollout is split into chunks that end at open-gripper steps. Each
//! chunk is summarized, the vision model picks the first failing chunk from
//! the downsampled video, and that chunk is diagnosed from its own frames. When
//! no chunk failed the plan itself is checked for logical flaws. The diagnosis,
//! the scene and retrieved skills then drive a replan.

pub mod chunk;
pub mod video;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chunk::{chunk_plan, Chunk};
pub use video::{downsample, sample_indices, StepBoundary, VideoError, VideoRef, DEFAULT_FRAME_BUDGET};

use crate::model::{template_ids, ChatRequest, Clients, ModelClient, ModelError};
use crate::planning::{self, render_examples, render_plan, PlanningError};
use crate::retrieval::ScoredExample;
use crate::rollout::{RolloutRecord, SceneDescription};
use crate::skill::{ProgramUnit, Skill, SkillOrigin, TaskSpec};

#[derive(Debug, Error)]
pub enum ReflectionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unusable {template} response ({message}): {raw:?}")]
    Protocol {
        template: &'static str,
        message: String,
        raw: String,
    },
    #[error("{0} returned an empty response")]
    EmptyResponse(&'static str),
    #[error("nothing to reflect on: {0}")]
    NoChunks(String),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Planning(#[from] PlanningError),
}

impl ReflectionError {
    /// Errors that end the whole run rather than the current iteration.
    pub fn is_fatal(&self) -> bool {
        match self {
            ReflectionError::Model(err) | ReflectionError::Planning(PlanningError::Model(err)) => {
                !matches!(err, ModelError::Network { .. })
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    ExecutionFailure,
    LogicalError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureDiagnosis {
    pub kind: FailureKind,
    pub failing_chunk: Option<usize>,
    pub reason: String,
}

impl FailureDiagnosis {
    pub fn execution(failing_chunk: usize, reason: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::ExecutionFailure,
            failing_chunk: Some(failing_chunk),
            reason: reason.into(),
        }
    }

    pub fn logical(reason: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::LogicalError,
            failing_chunk: None,
            reason: reason.into(),
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.reason.trim().is_empty()
            && (self.kind == FailureKind::ExecutionFailure) == self.failing_chunk.is_some()
    }

    pub fn replan_template(&self) -> &'static str {
        match self.kind {
            FailureKind::ExecutionFailure => template_ids::REPLAN_EXECUTION,
            FailureKind::LogicalError => template_ids::REPLAN_LOGICAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSummary {
    pub chunk_index: usize,
    pub text: String,
}

/// Summaries joined in chunk order, as the localizer sees them.
pub fn concatenate(summaries: &[ChunkSummary]) -> String {
    summaries
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

fn step_lines(chunk: &Chunk) -> String {
    chunk
        .steps
        .iter()
        .enumerate()
        .map(|(i, d)| format!("step {}: {}", chunk.first_step + i, d))
        .collect::<Vec<_>>()
        .join("\n")
}

fn non_empty(text: String, template: &'static str) -> Result<String, ReflectionError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        Err(ReflectionError::EmptyResponse(template))
    } else {
        Ok(trimmed.to_string())
    }
}

pub fn summarize(chunks: &[Chunk], llm: &ModelClient) -> Result<Vec<ChunkSummary>, ReflectionError> {
    if chunks.is_empty() {
        return Err(ReflectionError::NoChunks("summarize needs at least one chunk".into()));
    }
    chunks
        .iter()
        .map(|chunk| {
            let request = ChatRequest::llm(template_ids::SUMMARIZE)
                .slot("chunk_index", chunk.chunk_index.to_string())
                .slot("steps", step_lines(chunk));
            let text = non_empty(llm.complete(&request)?.text, template_ids::SUMMARIZE)?;
            Ok(ChunkSummary {
                chunk_index: chunk.chunk_index,
                text,
            })
        })
        .collect()
}

/// One line per chunk: `chunk <i> | steps <a>-<b> | frames <x>-<y> | <summary>`.
pub fn render_chunk_table(chunks: &[Chunk], summaries: &[ChunkSummary]) -> String {
    chunks
        .iter()
        .zip(summaries)
        .map(|(c, s)| {
            let frames = match c.frame_range {
                Some((first, last)) => format!("frames {first}-{last}"),
                None => "frames none (not executed)".to_string(),
            };
            format!(
                "chunk {} | steps {}-{} | {} | {}",
                c.chunk_index, c.first_step, c.last_step, frames, s.text
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn localize_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"(?i)failed_chunk\s*:\s*(none|null|-?\d+)").unwrap())
}

/// Reads the localizer's answer; `None` means every chunk executed successfully.
pub fn parse_localization(raw: &str, chunk_count: usize) -> Result<Option<usize>, ReflectionError> {
    let protocol = |message: String| ReflectionError::Protocol {
        template: template_ids::LOCALIZE,
        message,
        raw: raw.to_string(),
    };
    let caps = localize_pattern()
        .captures(raw)
        .ok_or_else(|| protocol("no failed_chunk line".into()))?;
    let value = caps[1].to_ascii_lowercase();
    if value == "none" || value == "null" {
        return Ok(None);
    }
    match value.parse::<i64>() {
        Ok(i) if i >= 0 && (i as usize) < chunk_count => Ok(Some(i as usize)),
        _ => Err(protocol(format!("chunk index {value} outside 0..{chunk_count}"))),
    }
}

/// Asks the vision model for the first failing chunk given the (already
/// downsampled) video and the chunk table built on the same frames.
pub fn localize_failure(
    chunks: &[Chunk],
    summaries: &[ChunkSummary],
    video: &VideoRef,
    vlm: &ModelClient,
) -> Result<Option<usize>, ReflectionError> {
    if chunks.len() != summaries.len() {
        return Err(ReflectionError::NoChunks(format!(
            "{} summaries for {} chunks",
            summaries.len(),
            chunks.len()
        )));
    }
    let request = ChatRequest::vlm(template_ids::LOCALIZE, video.frames.clone())
        .slot("chunks", render_chunk_table(chunks, summaries));
    let response = vlm.complete(&request)?;
    parse_localization(&response.text, chunks.len())
}

fn program_lines(chunk: &Chunk, programs: &[ProgramUnit]) -> String {
    programs
        .iter()
        .filter(|p| chunk.contains_step(p.step_index))
        .map(|p| format!("# step {}\n{}", p.step_index, p.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn diagnose(
    chunk: &Chunk,
    chunk_video: &VideoRef,
    programs: &[ProgramUnit],
    vlm: &ModelClient,
) -> Result<String, ReflectionError> {
    let request = ChatRequest::vlm(template_ids::DIAGNOSE, chunk_video.frames.clone())
        .slot("chunk_index", chunk.chunk_index.to_string())
        .slot("steps", step_lines(chunk))
        .slot("programs", program_lines(chunk, programs));
    non_empty(vlm.complete(&request)?.text, template_ids::DIAGNOSE)
}

pub fn logical_reflect(task: &TaskSpec, skill: &Skill, llm: &ModelClient) -> Result<String, ReflectionError> {
    let request = ChatRequest::llm(template_ids::LOGICAL_REFLECT)
        .slot("task", &task.description)
        .slot("plan", render_plan(skill.plan()));
    non_empty(llm.complete(&request)?.text, template_ids::LOGICAL_REFLECT)
}

/// Frames of `chunk` from the full-rate video, re-sampled to at most `budget` frames.
pub fn chunk_video(video: &VideoRef, chunk: &Chunk, budget: usize) -> Result<VideoRef, ReflectionError> {
    match chunk.frame_range {
        Some((first, last)) => Ok(downsample(&video.window(first, last), budget)?),
        None => Ok(VideoRef::default()),
    }
}

/// Localizes and explains a failed rollout of `skill`.
pub fn reflect(
    task: &TaskSpec,
    skill: &Skill,
    record: &RolloutRecord,
    clients: &Clients,
    frame_budget: usize,
) -> Result<FailureDiagnosis, ReflectionError> {
    let full_chunks = chunk_plan(skill, &record.video);
    let sampled = if record.video.is_empty() {
        record.video.clone()
    } else {
        downsample(&record.video, frame_budget)?
    };
    let sampled_chunks = chunk_plan(skill, &sampled);
    let summaries = summarize(&full_chunks, &clients.llm)?;
    match localize_failure(&sampled_chunks, &summaries, &sampled, &clients.vlm)? {
        Some(index) => {
            let chunk = &full_chunks[index];
            let frames = chunk_video(&record.video, chunk, frame_budget)?;
            let reason = diagnose(chunk, &frames, skill.programs(), &clients.vlm)?;
            Ok(FailureDiagnosis::execution(index, reason))
        }
        None => Ok(FailureDiagnosis::logical(logical_reflect(task, skill, &clients.llm)?)),
    }
}

/// Produces a revised skill from the diagnosis. Steps whose directive is
/// unchanged keep their program unit.
pub fn replan(
    task: &TaskSpec,
    skill: &Skill,
    diagnosis: &FailureDiagnosis,
    scene: &SceneDescription,
    examples: &[ScoredExample],
    llm: &ModelClient,
) -> Result<Skill, ReflectionError> {
    let mut request = ChatRequest::llm(diagnosis.replan_template())
        .slot("task", &task.description)
        .slot("reason", &diagnosis.reason)
        .slot("plan", render_plan(skill.plan()))
        .slot("scene", scene.render())
        .slot("examples", render_examples(examples));
    if let Some(index) = diagnosis.failing_chunk {
        request = request.slot("failing_chunk", index.to_string());
    }
    let response = llm.complete(&request)?;
    let steps = planning::parse_directives(&response.text)?;
    let units = planning::compose_all(&steps, llm, Some(skill))?;
    Ok(planning::assemble(task, steps, units)?.with_origin(SkillOrigin::Replanned))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::ScriptedBackend;
    use crate::rollout::SceneObject;

    fn task() -> TaskSpec {
        TaskSpec::new("stack", "stack the cubes").unwrap()
    }

    fn skill(plan: &[&str]) -> Skill {
        Skill::from_texts(&task(), plan.iter().copied(), plan.iter().map(|d| format!("do({d:?})")), SkillOrigin::Planned)
            .unwrap()
    }

    fn record(steps: usize, failed: bool) -> RolloutRecord {
        let per = 5;
        let mut frames: Vec<String> = (0..steps * per).map(|i| format!("f{i}")).collect();
        if failed {
            let last = frames.len() - 1;
            frames[last].push_str("#fail:x");
        }
        RolloutRecord {
            success: false,
            video: VideoRef::new(
                frames,
                (0..steps)
                    .map(|s| StepBoundary {
                        step: s,
                        first: s * per,
                        last: s * per + per - 1,
                    })
                    .collect(),
            ),
            scene: SceneDescription::new(vec![SceneObject::new("cube", [0.1, 0.2, 0.0], [0.05, 0.05, 0.05])]),
            halted_at_step: failed.then_some(steps - 1),
            env_note: String::new(),
        }
    }

    fn clients() -> Clients {
        Clients::shared(Arc::new(ScriptedBackend::new("test", |req| {
            Some(match req.template_id.as_str() {
                "summarize" => format!("chunk {}", req.slot_value("chunk_index").unwrap()),
                "localize" => {
                    let failed = req.frames().iter().any(|f| f.contains("#fail"));
                    if failed { "failed_chunk: 1" } else { "failed_chunk: none" }.into()
                }
                "diagnose" => "the cube slipped".into(),
                "logical_reflect" => "grasped while holding".into(),
                "replan_execution" | "replan_logical" => "composer(\"grasp the cube\")\ncomposer(\"open gripper\")".into(),
                "compose" => "new()".into(),
                _ => return None,
            })
        })))
    }

    #[test]
    fn localization_parsing() {
        assert_eq!(parse_localization("failed_chunk: 1", 3).unwrap(), Some(1));
        assert_eq!(parse_localization("Answer: FAILED_CHUNK: none", 3).unwrap(), None);
        assert_eq!(parse_localization("failed_chunk: null", 3).unwrap(), None);
        for bad in ["failed_chunk: 3", "failed_chunk: -1", "chunk two"] {
            match parse_localization(bad, 3) {
                Err(ReflectionError::Protocol { raw, .. }) => assert_eq!(raw, bad),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn execution_failure_pipeline_call_budget() {
        let c = clients();
        let s = skill(&["grasp the cube", "open gripper", "grasp the lid", "open gripper"]);
        let diag = reflect(&task(), &s, &record(4, true), &c, 30).unwrap();
        assert_eq!(diag, FailureDiagnosis::execution(1, "the cube slipped"));
        assert!(diag.is_valid());
        let log = c.log();
        assert_eq!(log.by_template()["summarize"], 2);
        assert_eq!(log.by_template()["localize"], 1);
        assert_eq!(log.by_template()["diagnose"], 1);
        assert!(!log.by_template().contains_key("logical_reflect"));
    }

    #[test]
    fn logical_path_when_nothing_failed() {
        let c = clients();
        let s = skill(&["grasp the cube", "grasp the lid"]);
        let diag = reflect(&task(), &s, &record(2, false), &c, 30).unwrap();
        assert_eq!(diag.kind, FailureKind::LogicalError);
        assert_eq!(diag.failing_chunk, None);
        assert_eq!(c.log().by_template()["logical_reflect"], 1);
        assert!(!c.log().by_template().contains_key("diagnose"));
    }

    #[test]
    fn replan_picks_template_and_reuses_programs() {
        let c = clients();
        let s = skill(&["grasp the cube", "move up", "open gripper"]);
        let scene = record(1, false).scene;
        let out = replan(&task(), &s, &FailureDiagnosis::logical("flaw"), &scene, &[], &c.llm).unwrap();
        assert_eq!(out.origin, SkillOrigin::Replanned);
        assert_eq!(out.programs()[0].text, "do(\"grasp the cube\")");
        assert_eq!(c.log().by_template()["replan_logical"], 1);
        assert!(!c.log().by_template().contains_key("compose"));
        replan(&task(), &s, &FailureDiagnosis::execution(0, "slip"), &scene, &[], &c.llm).unwrap();
        assert_eq!(c.log().by_template()["replan_execution"], 1);
    }

    #[test]
    fn replan_prompt_carries_scene_and_failing_chunk() {
        let seen = Arc::new(std::sync::Mutex::new(None));
        let sink = seen.clone();
        let c = Clients::shared(Arc::new(ScriptedBackend::new("capture", move |req| {
            if req.template_id == "replan_execution" {
                *sink.lock().unwrap() = Some(req.slots.clone());
            }
            Some("composer(\"open gripper\")".into())
        })));
        let s = skill(&["open gripper"]);
        let scene = record(1, false).scene;
        replan(&task(), &s, &FailureDiagnosis::execution(0, "slip"), &scene, &[], &c.llm).unwrap();
        let slots = seen.lock().unwrap().clone().unwrap();
        assert!(slots["scene"].contains("cube"));
        assert!(slots["scene"].contains("0.050"));
        assert_eq!(slots["failing_chunk"], "0");
        assert_eq!(slots["examples"], "(none)");
    }
}
