//! In-process scripted environments over a [`ScenarioSet`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::scenario::{Scenario, ScenarioSet, Verdict, SLIP_MARKER};
use crate::rollout::{EnvDescription, EnvError, Environment, RolloutRecord, RolloutRequest, PROTOCOL_VERSION};

/// A splitmix64 generator whose state starts at `seed`.
pub fn splitmix(seed: u64) -> SplitMix64 {
    SplitMix64::from_seed(seed.to_le_bytes())
}

/// Maps a 64-bit draw to `[0, 1)` using its top 53 bits.
pub fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn directives(request: &RolloutRequest) -> Vec<&str> {
    request.skill.plan().iter().map(|d| d.as_str()).collect()
}

fn scenario<'a>(set: &'a ScenarioSet, task_id: &str) -> Result<&'a Scenario, EnvError> {
    set.get(task_id)
        .ok_or_else(|| EnvError::Rejected(format!("unknown task `{task_id}`")))
}

/// Outcomes depend only on the task and the plan.
#[derive(Debug, Clone)]
pub struct DeterministicEnv {
    set: Arc<ScenarioSet>,
    rollouts: u64,
}

impl DeterministicEnv {
    pub fn new(set: Arc<ScenarioSet>) -> Self {
        Self { set, rollouts: 0 }
    }

    pub fn scenarios(&self) -> &Arc<ScenarioSet> {
        &self.set
    }

    pub fn rollouts(&self) -> u64 {
        self.rollouts
    }
}

impl Environment for DeterministicEnv {
    fn describe(&mut self) -> Result<EnvDescription, EnvError> {
        Ok(EnvDescription {
            name: format!("builtin:{}", self.set.name),
            protocol_version: PROTOCOL_VERSION,
            tasks: self.set.task_specs(),
        })
    }

    fn reset(&mut self) -> Result<(), EnvError> {
        Ok(())
    }

    fn rollout(&mut self, request: &RolloutRequest) -> Result<RolloutRecord, EnvError> {
        let s = scenario(&self.set, &request.task_id)?;
        self.rollouts += 1;
        Ok(s.record(&s.judge(&directives(request)), self.set.frames_per_step))
    }

    fn shutdown(&mut self) -> Result<(), EnvError> {
        Ok(())
    }
}

/// Succeeds with probability `p(task)` when the plan would succeed
/// deterministically.
///
/// The generator is splitmix64 with state `request.seed ^ suite_seed`. The
/// first output `x` gives `u = (x >> 11) * 2^-53` and the rollout succeeds iff
/// `u < p`. On a stochastic failure a second output picks the step that slips
/// (`x mod plan_len`); the run halts there with marker `slip`.
#[derive(Debug, Clone)]
pub struct StochasticEnv {
    set: Arc<ScenarioSet>,
    success_p: BTreeMap<String, f64>,
    default_p: f64,
    suite_seed: u64,
}

impl StochasticEnv {
    pub fn new(set: Arc<ScenarioSet>, success_p: BTreeMap<String, f64>, default_p: f64, suite_seed: u64) -> Self {
        Self {
            set,
            success_p,
            default_p,
            suite_seed,
        }
    }

    pub fn probability(&self, task_id: &str) -> f64 {
        self.success_p.get(task_id).copied().unwrap_or(self.default_p)
    }
}

impl Environment for StochasticEnv {
    fn describe(&mut self) -> Result<EnvDescription, EnvError> {
        Ok(EnvDescription {
            name: format!("builtin:stochastic:{}", self.set.name),
            protocol_version: PROTOCOL_VERSION,
            tasks: self.set.task_specs(),
        })
    }

    fn reset(&mut self) -> Result<(), EnvError> {
        Ok(())
    }

    fn rollout(&mut self, request: &RolloutRequest) -> Result<RolloutRecord, EnvError> {
        let s = scenario(&self.set, &request.task_id)?;
        let plan = directives(request);
        let verdict = s.judge(&plan);
        if !verdict.success {
            return Ok(s.record(&verdict, self.set.frames_per_step));
        }
        let mut rng = splitmix(request.seed ^ self.suite_seed);
        let u = unit_interval(rng.next_u64());
        if u < self.probability(&request.task_id) {
            return Ok(s.record(&verdict, self.set.frames_per_step));
        }
        let step = (rng.next_u64() % plan.len() as u64) as usize;
        let slipped = Verdict {
            success: false,
            executed_steps: step + 1,
            halted_at_step: Some(step),
            marker: Some(SLIP_MARKER.to_string()),
        };
        Ok(s.record(&slipped, self.set.frames_per_step))
    }

    fn shutdown(&mut self) -> Result<(), EnvError> {
        Ok(())
    }
}
