//! Execute a flawed skill, split its video into chunks at each gripper
//! release, localize the failing chunk, diagnose it and replan.
//!
//! Run with `cargo run --example video_reflection`.

use std::sync::Arc;

use skillloop::model::Clients;
use skillloop::planning;
use skillloop::reflection::{self, chunk_plan, downsample, DEFAULT_FRAME_BUDGET};
use skillloop::rollout::{Environment, RolloutRequest};
use skillloop::suite::{scripted_backend, DeterministicEnv, ScenarioSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = ScenarioSet::deterministic();
    let clients = Clients::shared(Arc::new(scripted_backend(set.clone())));
    let mut env = DeterministicEnv::new(set.clone());
    let task = set.get("two-cups").expect("bundled task").task();

    let skill = planning::plan_skill(&task, &clients.llm, &[])?;
    let record = env.rollout(&RolloutRequest::new(&task.id, skill.clone(), 0))?;
    println!("first attempt: success={} frames={} note={}", record.success, record.video.len(), record.env_note);

    for chunk in chunk_plan(&skill, &record.video) {
        println!("  chunk {} steps {}..={} frames {:?}", chunk.chunk_index, chunk.first_step, chunk.last_step, chunk.frame_range);
    }
    let sampled = downsample(&record.video, DEFAULT_FRAME_BUDGET)?;
    println!("downsampled {} frames to {}", record.video.len(), sampled.len());

    let diagnosis = reflection::reflect(&task, &skill, &record, &clients, DEFAULT_FRAME_BUDGET)?;
    println!("diagnosis: {:?} chunk {:?}: {}", diagnosis.kind, diagnosis.failing_chunk, diagnosis.reason);

    let revised = reflection::replan(&task, &skill, &diagnosis, &record.scene, &[], &clients.llm)?;
    let retry = env.rollout(&RolloutRequest::new(&task.id, revised.clone(), 1))?;
    println!("after replanning: success={} ({} steps)", retry.success, revised.len());
    println!("model calls: {:?}", clients.log().by_template());
    Ok(())
}
