use serde::{Deserialize, Serialize};

use super::video::VideoRef;
use crate::skill::{Skill, SubtaskInstruction};

/// A run of consecutive plan steps closed by an open-gripper step (or the plan end).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_index: usize,
    pub first_step: usize,
    pub last_step: usize,
    /// Frames covering the chunk's executed steps; `None` when none of its steps ran.
    pub frame_range: Option<(usize, usize)>,
    /// Number of leading steps of this chunk that were executed.
    pub executed_steps: usize,
    pub steps: Vec<SubtaskInstruction>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn fully_executed(&self) -> bool {
        self.executed_steps == self.steps.len()
    }

    pub fn contains_step(&self, step: usize) -> bool {
        (self.first_step..=self.last_step).contains(&step)
    }
}

/// Splits the plan after every open-gripper step.
///
/// Steps the executor never reached are chunked by the same rule; their
/// chunks report no frames so the localizer can still point at them.
pub fn chunk_plan(skill: &Skill, video: &VideoRef) -> Vec<Chunk> {
    let plan = skill.plan();
    let executed = video.step_boundaries.len().min(plan.len());
    let mut chunks = Vec::new();
    let mut start = 0;
    for (i, step) in plan.iter().enumerate() {
        if !(step.is_open_gripper() || i + 1 == plan.len()) {
            continue;
        }
        let executed_here = executed.clamp(start, i + 1) - start;
        let frame_range = (executed_here > 0).then(|| {
            let first = video.step_boundaries[start].first;
            let last = video.step_boundaries[start + executed_here - 1].last;
            (first, last)
        });
        chunks.push(Chunk {
            chunk_index: chunks.len(),
            first_step: start,
            last_step: i,
            frame_range,
            executed_steps: executed_here,
            steps: plan[start..=i].to_vec(),
        });
        start = i + 1;
    }
    chunks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reflection::video::StepBoundary;
    use crate::skill::{SkillOrigin, TaskSpec};

    fn skill(plan: &[&str]) -> Skill {
        let task = TaskSpec::new("t", "d").unwrap();
        Skill::from_texts(&task, plan.iter().copied(), plan.iter().map(|_| "x()"), SkillOrigin::Planned).unwrap()
    }

    fn full_video(steps: usize, per_step: usize) -> VideoRef {
        VideoRef::new(
            (0..steps * per_step).map(|i| format!("f{i}")).collect(),
            (0..steps)
                .map(|s| StepBoundary {
                    step: s,
                    first: s * per_step,
                    last: s * per_step + per_step - 1,
                })
                .collect(),
        )
    }

    #[test]
    fn splits_after_open_gripper() {
        let s = skill(&["grasp A", "move", "open gripper", "grasp B", "open gripper"]);
        let chunks = chunk_plan(&s, &full_video(5, 2));
        assert_eq!(chunks.iter().map(Chunk::len).collect::<Vec<_>>(), vec![3, 2]);
        assert_eq!(chunks[0].frame_range, Some((0, 5)));
        assert_eq!(chunks[1].frame_range, Some((6, 9)));
    }

    #[test]
    fn no_open_gripper_is_one_chunk() {
        let s = skill(&["push the button", "back to default pose"]);
        let chunks = chunk_plan(&s, &full_video(2, 3));
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].len(), 2);
    }

    #[test]
    fn unexecuted_steps_have_no_frames() {
        let s = skill(&["grasp A", "open gripper", "grasp B", "open gripper", "back to default pose"]);
        let mut v = full_video(5, 2);
        v.step_boundaries.truncate(1);
        v.frames.truncate(2);
        let chunks = chunk_plan(&s, &v);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].frame_range, Some((0, 1)));
        assert_eq!(chunks[0].executed_steps, 1);
        assert!(!chunks[0].fully_executed());
        assert_eq!(chunks[1].frame_range, None);
        assert_eq!(chunks[2].frame_range, None);
    }
}
