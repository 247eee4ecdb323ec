//! Estimate success rates of fixed skills in the stochastic environment and
//! compare them with the configured per-task probabilities.
//!
//! Run with `cargo run --example stochastic_success_rates`.

use std::collections::BTreeMap;

use skillloop::evaluator::{evaluate, EvalConfig};
use skillloop::memory::SnapshotStore;
use skillloop::skill::{Skill, SkillOrigin};
use skillloop::suite::{program_for, ScenarioSet, StochasticEnv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = ScenarioSet::deterministic();
    let probabilities = BTreeMap::from([("press-button".to_string(), 0.9), ("close-drawer".to_string(), 0.3)]);
    let mut env = StochasticEnv::new(set.clone(), probabilities, 0.6, 7);

    let tasks = vec!["press-button".to_string(), "close-drawer".to_string()];
    let mut store = SnapshotStore::new(1);
    for id in &tasks {
        let s = set.get(id).expect("bundled task");
        let plan = s.regenerated_plan.clone().unwrap_or_else(|| s.initial_plan.clone());
        let skill = Skill::from_texts(&s.task(), &plan, plan.iter().map(|d| program_for(d)), SkillOrigin::Planned)?;
        store.insert(1, id, Some(skill))?;
    }

    let cfg = EvalConfig {
        trials: 400,
        ..EvalConfig::default()
    };
    let report = evaluate(&store, &tasks, &mut env, &cfg)?;
    for id in &tasks {
        let p = env.probability(id);
        let rate = report.success_rate(id, 1).unwrap_or(f64::NAN);
        let sigma = (p * (1.0 - p) / f64::from(cfg.trials)).sqrt();
        println!("{id:<14} configured {p:.2}  measured {rate:.3}  ({:+.1} sigma)", (rate - p) / sigma);
    }
    Ok(())
}
