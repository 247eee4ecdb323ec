//! Plan a task into subtask directives, compose one program per step and
//! inspect the model calls that cost.
//!
//! Run with `cargo run --example plan_and_compose`.

use std::sync::Arc;

use skillloop::model::Clients;
use skillloop::planning;
use skillloop::suite::{scripted_backend, ScenarioSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = ScenarioSet::deterministic();
    let clients = Clients::shared(Arc::new(scripted_backend(set.clone())));
    let task = set.get("two-cups").expect("bundled task").task();

    let skill = planning::plan_skill(&task, &clients.llm, &[])?;
    println!("{}: {}", task.id, task.description);
    for (step, program) in skill.plan().iter().zip(skill.programs()) {
        println!("  {:>2}. {:<40} {}", program.step_index, step.as_str(), program.text.replace('\n', " "));
    }
    println!("skill hash {}", skill.content_hash());
    for (template, calls) in clients.log().by_template() {
        println!("{template}: {calls} call(s)");
    }
    Ok(())
}
