//! Train the full loop, the retry baseline and the no-transfer ablation,
//! then evaluate every snapshot and print learning curves side by side.
//!
//! Run with `cargo run --example compare_methods`.

use std::sync::Arc;

use skillloop::evaluator::{evaluate, summary_table, EvalConfig, EvalReport};
use skillloop::model::Clients;
use skillloop::retrieval::HashedBagProvider;
use skillloop::suite::{scripted_backend, DeterministicEnv, ScenarioSet};
use skillloop::trainer::{initial_plan_store, train, TrainConfig, TrainMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = ScenarioSet::transfer();
    let tasks = set.task_ids();
    let eval_cfg = EvalConfig::default();
    let mut reports: Vec<(String, EvalReport)> = Vec::new();

    for mode in TrainMode::ALL {
        let clients = Clients::shared(Arc::new(scripted_backend(set.clone())));
        let cfg = TrainConfig::new(set.task_specs(), mode);
        let out = train(&cfg, &mut DeterministicEnv::new(set.clone()), &clients, &HashedBagProvider::default())?;
        let report = evaluate(&out.snapshots, &tasks, &mut DeterministicEnv::new(set.clone()), &eval_cfg)?;
        reports.push((mode.to_string(), report));
    }
    let clients = Clients::shared(Arc::new(scripted_backend(set.clone())));
    let store = initial_plan_store(&set.task_specs(), &clients, 10)?;
    reports.push(("static".into(), evaluate(&store, &tasks, &mut DeterministicEnv::new(set.clone()), &eval_cfg)?));

    let table: Vec<(&str, &EvalReport)> = reports.iter().map(|(name, r)| (name.as_str(), r)).collect();
    println!("{}", summary_table(&table));
    for (name, report) in &reports {
        let curve: Vec<String> = report
            .curve()
            .iter()
            .map(|p| p.mean_success_rate.map_or("-".into(), |v| format!("{v:.2}")))
            .collect();
        println!("{name:<20} {}", curve.join(" "));
    }
    Ok(())
}
