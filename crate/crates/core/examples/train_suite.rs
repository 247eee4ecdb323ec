//! Run the full training loop on the bundled deterministic suite and print
//! what happened on every iteration.
//!
//! Run with `cargo run --example train_suite`.

use std::sync::Arc;

use skillloop::model::Clients;
use skillloop::retrieval::HashedBagProvider;
use skillloop::suite::{scripted_backend, DeterministicEnv, ScenarioSet};
use skillloop::trainer::{total_model_calls, train, TrainConfig, TrainMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = ScenarioSet::deterministic();
    let clients = Clients::shared(Arc::new(scripted_backend(set.clone())));
    let cfg = TrainConfig::new(set.task_specs(), TrainMode::Vireskill);
    let mut env = DeterministicEnv::new(set.clone());
    let out = train(&cfg, &mut env, &clients, &HashedBagProvider::default())?;

    for id in set.task_ids() {
        let trace: Vec<String> = out
            .log
            .for_task(&id)
            .map(|r| {
                let ok = r.rollout.as_ref().is_some_and(|o| o.success);
                format!("{}{}", r.iteration, if ok { "+" } else { "-" })
            })
            .collect();
        let learned = if out.memory.get(&id).is_some() { "learned" } else { "not learned" };
        println!("{id:<16} {learned:<12} {}", trace.join(" "));
    }
    let calls = total_model_calls(&out.log);
    println!("{} iterations, {} model calls ({} plan, {} diagnose)", out.log.records.len(), calls.total, calls.plan, calls.diagnose);
    Ok(())
}
