//! Scenario tables for the scripted tabletop environments.
//!
//! A scenario fixes a task, its scene, the substrings a successful plan must
//! mention, and hazards: directives that fail unless they carry a required
//! refinement. Executing a plan walks its steps in order:
//!
//! 1. Each executed step emits `frames_per_step` frames labelled
//!    `<task>/s<step>/f<j>`.
//! 2. A step containing a hazard's `trigger` (case-insensitive) but not its
//!    `requires` text fails once the trigger has matched `occurrence` times.
//!    The run halts there and the step's last frame gets `#fail:<marker>`.
//! 3. Grasping while already holding an object is a logical flaw; "open
//!    gripper" releases. A flawed plan executes every step but fails with
//!    marker `release-before-grasp` and no halted step.
//! 4. Otherwise the run succeeds iff every goal substring appears in some step.
//!
//! `env_note` is `ok` or `fail marker=<m> step=<i>` (`step=none` when no step halted).

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reflection::{StepBoundary, VideoRef};
use crate::rollout::{RolloutRecord, SceneDescription, SceneObject};
use crate::skill::TaskSpec;

pub const LOGICAL_MARKER: &str = "release-before-grasp";
pub const GOAL_MARKER: &str = "goal-unmet";
pub const SLIP_MARKER: &str = "slip";

pub const DETERMINISTIC_SUITE_JSON: &str = include_str!("../../scenarios/deterministic_suite.json");
pub const TRANSFER_SUITE_JSON: &str = include_str!("../../scenarios/transfer_suite.json");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid scenario file at {field}: {message}")]
    Parse { field: String, message: String },
    #[error("invalid scenario `{task}`: {message}")]
    Invalid { task: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fix {
    ReplaceStep(String),
    ReplacePlan(Vec<String>),
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hazard {
    pub trigger: String,
    #[serde(default)]
    pub requires: Option<String>,
    #[serde(default = "one")]
    pub occurrence: usize,
    pub marker: String,
    pub reason: String,
    pub fix: Fix,
    /// When set, the scripted replanner only applies `fix` if a retrieved
    /// example mentions this text, and substitutes `fallback_step` otherwise.
    #[serde(default)]
    pub transfer_hint: Option<String>,
    #[serde(default)]
    pub fallback_step: Option<String>,
}

impl Hazard {
    /// Whether `step` is unsafe under this hazard (ignoring occurrence counting).
    pub fn matches(&self, step: &str) -> bool {
        let step = step.to_lowercase();
        step.contains(&self.trigger.to_lowercase())
            && self
                .requires
                .as_ref()
                .is_none_or(|r| !step.contains(&r.to_lowercase()))
    }

    /// Whether `step` counts toward the occurrence of this hazard's trigger.
    pub fn triggered_by(&self, step: &str) -> bool {
        step.to_lowercase().contains(&self.trigger.to_lowercase())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub description: String,
    pub scene: Vec<SceneObject>,
    pub goal: Vec<String>,
    #[serde(default)]
    pub hazards: Vec<Hazard>,
    pub initial_plan: Vec<String>,
    #[serde(default)]
    pub regenerated_plan: Option<Vec<String>>,
    #[serde(default)]
    pub logical_fix_plan: Option<Vec<String>>,
}

/// How a plan fares in a scenario, before any stochastic draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub success: bool,
    pub executed_steps: usize,
    pub halted_at_step: Option<usize>,
    pub marker: Option<String>,
}

impl Scenario {
    pub fn task(&self) -> TaskSpec {
        TaskSpec::new(&self.id, &self.description).expect("validated scenario")
    }

    pub fn scene(&self) -> SceneDescription {
        SceneDescription::new(self.scene.clone())
    }

    pub fn hazard_by_marker(&self, marker: &str) -> Option<&Hazard> {
        self.hazards.iter().find(|h| h.marker == marker)
    }

    pub fn judge<S: AsRef<str>>(&self, plan: &[S]) -> Verdict {
        let mut seen = vec![0usize; self.hazards.len()];
        let mut holding = false;
        let mut logical_flaw = false;
        for (i, step) in plan.iter().enumerate() {
            let step = step.as_ref();
            for (h, hazard) in self.hazards.iter().enumerate() {
                if !hazard.triggered_by(step) {
                    continue;
                }
                seen[h] += 1;
                if seen[h] >= hazard.occurrence && hazard.matches(step) {
                    return Verdict {
                        success: false,
                        executed_steps: i + 1,
                        halted_at_step: Some(i),
                        marker: Some(hazard.marker.clone()),
                    };
                }
            }
            let lower = step.to_lowercase();
            if lower.contains("open gripper") {
                holding = false;
            } else if lower.contains("grasp") {
                logical_flaw |= holding;
                holding = true;
            }
        }
        let marker = if logical_flaw {
            Some(LOGICAL_MARKER.to_string())
        } else if !self.goal.iter().all(|g| {
            let g = g.to_lowercase();
            plan.iter().any(|s| s.as_ref().to_lowercase().contains(&g))
        }) {
            Some(GOAL_MARKER.to_string())
        } else {
            None
        };
        Verdict {
            success: marker.is_none(),
            executed_steps: plan.len(),
            halted_at_step: None,
            marker,
        }
    }

    /// Builds the record an executor reports for `verdict`.
    pub fn record(&self, verdict: &Verdict, frames_per_step: usize) -> RolloutRecord {
        let mut frames = Vec::with_capacity(verdict.executed_steps * frames_per_step);
        let mut step_boundaries = Vec::with_capacity(verdict.executed_steps);
        for step in 0..verdict.executed_steps {
            let first = frames.len();
            for j in 0..frames_per_step {
                frames.push(format!("{}/s{step}/f{j}", self.id));
            }
            step_boundaries.push(StepBoundary {
                step,
                first,
                last: frames.len() - 1,
            });
        }
        if let (Some(step), Some(marker)) = (verdict.halted_at_step, &verdict.marker) {
            let last = step_boundaries[step].last;
            frames[last].push_str(&format!("#fail:{marker}"));
        }
        let env_note = match (&verdict.marker, verdict.halted_at_step) {
            (None, _) => "ok".to_string(),
            (Some(m), Some(step)) => format!("fail marker={m} step={step}"),
            (Some(m), None) => format!("fail marker={m} step=none"),
        };
        RolloutRecord {
            success: verdict.success,
            video: VideoRef::new(frames, step_boundaries),
            scene: self.scene(),
            halted_at_step: verdict.halted_at_step,
            env_note,
        }
    }

    fn validate(&self) -> Result<(), String> {
        TaskSpec::new(&self.id, &self.description).map_err(|e| e.to_string())?;
        self.scene().validate()?;
        if self.initial_plan.is_empty() {
            return Err("initial_plan is empty".into());
        }
        for h in &self.hazards {
            if h.trigger.trim().is_empty() || h.marker.trim().is_empty() || h.reason.trim().is_empty() {
                return Err(format!("hazard `{}` needs trigger, marker and reason", h.marker));
            }
            if h.occurrence == 0 {
                return Err(format!("hazard `{}` has occurrence 0", h.marker));
            }
            if h.transfer_hint.is_some() && h.fallback_step.is_none() {
                return Err(format!("hazard `{}` has a transfer_hint but no fallback_step", h.marker));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub version: u32,
    pub name: String,
    pub frames_per_step: usize,
    pub tasks: Vec<Scenario>,
}

impl ScenarioSet {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let set: ScenarioSet = serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Parse {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The six-task suite: two tasks solved by their first plan, two needing
    /// one execution-failure replan, one needing two, one needing the
    /// logical-error path.
    pub fn deterministic() -> Arc<Self> {
        Arc::new(Self::from_json(DETERMINISTIC_SUITE_JSON).expect("bundled suite is valid"))
    }

    /// The suite plus a single-bowl task whose fix the two-bowl task can only
    /// learn from a retrieved example.
    pub fn transfer() -> Arc<Self> {
        Arc::new(Self::from_json(TRANSFER_SUITE_JSON).expect("bundled suite is valid"))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.frames_per_step == 0 {
            return Err(ScenarioError::Parse {
                field: "frames_per_step".into(),
                message: "must be at least 1".into(),
            });
        }
        let mut ids = std::collections::BTreeSet::new();
        for task in &self.tasks {
            let invalid = |message: String| ScenarioError::Invalid {
                task: task.id.clone(),
                message,
            };
            if !ids.insert(task.id.as_str()) {
                return Err(invalid("duplicate task id".into()));
            }
            task.validate().map_err(invalid)?;
        }
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Option<&Scenario> {
        self.tasks.iter().find(|t| t.id == task_id)
    }

    pub fn by_description(&self, description: &str) -> Option<&Scenario> {
        self.tasks.iter().find(|t| t.description == description)
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(Scenario::task).collect()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    /// The hazard planting `marker` in any task.
    pub fn hazard_by_marker(&self, marker: &str) -> Option<&Hazard> {
        self.tasks.iter().find_map(|t| t.hazard_by_marker(marker))
    }
}
