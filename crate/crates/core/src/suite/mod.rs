//! Scripted tabletop suites: scenario tables, in-process environments and the
//! matching scripted models.
//!
//! The scenario JSON files under `scenarios/` are the single source of truth
//! for task semantics; any external executor replaying them must produce
//! field-identical rollout replies.

pub mod env;
pub mod responder;
pub mod scenario;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use env::{splitmix, unit_interval, DeterministicEnv, StochasticEnv};
pub use responder::{program_for, respond, scripted_backend};
pub use scenario::{Fix, Hazard, Scenario, ScenarioError, ScenarioSet, Verdict};

use crate::rollout::Environment;

pub const DEFAULT_SUCCESS_P: f64 = 0.6;

/// Settings for `builtin:<name>` environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuiltinOptions {
    /// Scenario file replacing the bundled suite.
    pub scenarios: Option<PathBuf>,
    /// Per-task success probability for `builtin:stochastic`.
    pub success_p: BTreeMap<String, f64>,
    pub default_p: f64,
    pub suite_seed: u64,
}

impl Default for BuiltinOptions {
    fn default() -> Self {
        Self {
            scenarios: None,
            success_p: BTreeMap::new(),
            default_p: DEFAULT_SUCCESS_P,
            suite_seed: 0,
        }
    }
}

impl BuiltinOptions {
    pub fn validate(&self) -> Result<(), String> {
        let check = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {p}"))
            }
        };
        check("default_p", self.default_p)?;
        for (task, p) in &self.success_p {
            check(&format!("success_p.{task}"), *p)?;
        }
        Ok(())
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["deterministic", "transfer", "stochastic"];

/// Scenario table used by `builtin:<name>`.
pub fn builtin_scenarios(name: &str, options: &BuiltinOptions) -> Result<Arc<ScenarioSet>, ScenarioError> {
    if let Some(path) = &options.scenarios {
        return Ok(Arc::new(ScenarioSet::load(path)?));
    }
    match name {
        "transfer" => Ok(ScenarioSet::transfer()),
        "deterministic" | "stochastic" => Ok(ScenarioSet::deterministic()),
        other => Err(ScenarioError::Invalid {
            task: other.to_string(),
            message: format!("unknown builtin environment (expected one of {})", BUILTIN_NAMES.join(", ")),
        }),
    }
}

pub fn open_builtin(name: &str, options: &BuiltinOptions) -> Result<Box<dyn Environment>, ScenarioError> {
    let set = builtin_scenarios(name, options)?;
    Ok(match name {
        "stochastic" => Box::new(StochasticEnv::new(
            set,
            options.success_p.clone(),
            options.default_p,
            options.suite_seed,
        )),
        _ => Box::new(DeterministicEnv::new(set)),
    })
}
