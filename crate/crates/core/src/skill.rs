//! Core domain types: tasks, subtask directives, program units and skills.
//!
//! A [`Skill`] pairs an ordered high-level plan with one low-level program unit
//! per plan step. It is the unit that gets stored, replayed and repaired.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Violations of the structural invariants of the domain types.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvariantError {
    #[error("task id must not be empty")]
    EmptyTaskId,
    #[error("task description must not be empty")]
    EmptyDescription,
    #[error("plan must contain at least one step")]
    EmptyPlan,
    #[error("plan has {plan} steps but {programs} program units were supplied")]
    LengthMismatch { plan: usize, programs: usize },
    #[error("subtask directive at step {step} is invalid: {reason}")]
    InvalidDirective { step: usize, reason: &'static str },
    #[error("program unit for step {step} is empty")]
    EmptyProgram { step: usize },
    #[error("program unit at position {position} carries step index {step_index}")]
    MisalignedProgram { position: usize, step_index: usize },
}

/// A task to be learned, identified by a stable id and described in free-form language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub description: String,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, description: impl Into<String>) -> Result<Self, InvariantError> {
        let task = Self {
            id: id.into(),
            description: description.into(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.id.is_empty() {
            return Err(InvariantError::EmptyTaskId);
        }
        if self.description.trim().is_empty() {
            return Err(InvariantError::EmptyDescription);
        }
        Ok(())
    }
}

/// One imperative plan step, e.g. `grasp the blue cup`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubtaskInstruction(String);

impl SubtaskInstruction {
    pub fn new(text: impl Into<String>) -> Result<Self, InvariantError> {
        let text = text.into();
        Self::check(&text).map_err(|reason| InvariantError::InvalidDirective { step: 0, reason })?;
        Ok(Self(text))
    }

    fn check(text: &str) -> Result<(), &'static str> {
        if text.trim().is_empty() {
            Err("empty directive")
        } else if text.contains('\n') || text.contains('\r') {
            Err("directive contains a line break")
        } else {
            Ok(())
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Whether this step releases the held object.
    pub fn is_open_gripper(&self) -> bool {
        self.0.to_lowercase().contains("open gripper")
    }
}

impl fmt::Display for SubtaskInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Opaque low-level program text for one plan step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProgramUnit {
    pub step_index: usize,
    pub text: String,
}

impl ProgramUnit {
    pub fn new(step_index: usize, text: impl Into<String>) -> Result<Self, InvariantError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(InvariantError::EmptyProgram { step: step_index });
        }
        Ok(Self { step_index, text })
    }
}

/// Where a skill came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillOrigin {
    Planned,
    Replanned,
    Reused,
}

/// Training position at which a skill was produced. `(0, 0)` means unstamped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CreatedAt {
    pub round: u32,
    pub iteration: u32,
}

impl CreatedAt {
    pub const UNSET: CreatedAt = CreatedAt { round: 0, iteration: 0 };

    pub fn new(round: u32, iteration: u32) -> Self {
        Self { round, iteration }
    }
}

/// A plan paired step-for-step with program units.
///
/// The skill also carries the description of its task so a stored memory is
/// self-contained for similarity retrieval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SkillRepr", into = "SkillRepr")]
pub struct Skill {
    task_id: String,
    description: String,
    plan: Vec<SubtaskInstruction>,
    programs: Vec<ProgramUnit>,
    pub created_at: CreatedAt,
    pub origin: SkillOrigin,
}

impl Skill {
    pub fn new(
        task: &TaskSpec,
        plan: Vec<SubtaskInstruction>,
        programs: Vec<ProgramUnit>,
        origin: SkillOrigin,
    ) -> Result<Self, InvariantError> {
        let skill = Self {
            task_id: task.id.clone(),
            description: task.description.clone(),
            plan,
            programs,
            created_at: CreatedAt::UNSET,
            origin,
        };
        skill.validate()?;
        Ok(skill)
    }

    /// Builds a skill from raw strings; program step indices follow plan positions.
    pub fn from_texts<P, Q>(task: &TaskSpec, plan: P, programs: Q, origin: SkillOrigin) -> Result<Self, InvariantError>
    where
        P: IntoIterator,
        P::Item: Into<String>,
        Q: IntoIterator,
        Q::Item: Into<String>,
    {
        let plan = plan
            .into_iter()
            .enumerate()
            .map(|(step, text)| {
                let text = text.into();
                SubtaskInstruction::check(&text)
                    .map(|()| SubtaskInstruction(text))
                    .map_err(|reason| InvariantError::InvalidDirective { step, reason })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let programs = programs
            .into_iter()
            .enumerate()
            .map(|(i, text)| ProgramUnit::new(i, text))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(task, plan, programs, origin)
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.task_id.is_empty() {
            return Err(InvariantError::EmptyTaskId);
        }
        if self.plan.is_empty() {
            return Err(InvariantError::EmptyPlan);
        }
        if self.plan.len() != self.programs.len() {
            return Err(InvariantError::LengthMismatch {
                plan: self.plan.len(),
                programs: self.programs.len(),
            });
        }
        for (step, directive) in self.plan.iter().enumerate() {
            SubtaskInstruction::check(directive.as_str())
                .map_err(|reason| InvariantError::InvalidDirective { step, reason })?;
        }
        for (position, unit) in self.programs.iter().enumerate() {
            if unit.step_index != position {
                return Err(InvariantError::MisalignedProgram {
                    position,
                    step_index: unit.step_index,
                });
            }
            if unit.text.trim().is_empty() {
                return Err(InvariantError::EmptyProgram { step: position });
            }
        }
        Ok(())
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn plan(&self) -> &[SubtaskInstruction] {
        &self.plan
    }

    pub fn programs(&self) -> &[ProgramUnit] {
        &self.programs
    }

    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }

    /// True when plan and programs match, ignoring origin and creation stamp.
    pub fn same_content(&self, other: &Skill) -> bool {
        self.task_id == other.task_id
            && self.description == other.description
            && self.plan == other.plan
            && self.programs == other.programs
    }

    pub fn with_origin(mut self, origin: SkillOrigin) -> Self {
        self.origin = origin;
        self
    }

    pub fn stamped(mut self, round: u32, iteration: u32) -> Self {
        self.created_at = CreatedAt::new(round, iteration);
        self
    }

    /// Stable content hash over task id, plan and programs (hex sha256).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.task_id.as_bytes());
        for (directive, unit) in self.plan.iter().zip(&self.programs) {
            hasher.update([0x1e]);
            hasher.update(directive.as_str().as_bytes());
            hasher.update([0x1f]);
            hasher.update(unit.text.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkillRepr {
    task_id: String,
    description: String,
    plan: Vec<String>,
    programs: Vec<String>,
    created_at: CreatedAt,
    origin: SkillOrigin,
}

impl From<Skill> for SkillRepr {
    fn from(skill: Skill) -> Self {
        Self {
            task_id: skill.task_id,
            description: skill.description,
            plan: skill.plan.into_iter().map(|d| d.0).collect(),
            programs: skill.programs.into_iter().map(|p| p.text).collect(),
            created_at: skill.created_at,
            origin: skill.origin,
        }
    }
}

impl TryFrom<SkillRepr> for Skill {
    type Error = InvariantError;

    fn try_from(repr: SkillRepr) -> Result<Self, Self::Error> {
        let task = TaskSpec {
            id: repr.task_id,
            description: repr.description,
        };
        let mut skill = Skill::from_texts(&task, repr.plan, repr.programs, repr.origin)?;
        skill.created_at = repr.created_at;
        Ok(skill)
    }
}
