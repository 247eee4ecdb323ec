//! Record every model response of a training run, then replay the run from
//! the recorded fixture with no live backend.
//!
//! Run with `cargo run --example record_replay`.

use std::sync::Arc;

use skillloop::model::{Clients, FixtureBackend, RecordingBackend};
use skillloop::retrieval::HashedBagProvider;
use skillloop::suite::{scripted_backend, DeterministicEnv, ScenarioSet};
use skillloop::trainer::{train, TrainConfig, TrainMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = ScenarioSet::deterministic();
    let cfg = TrainConfig::new(set.task_specs(), TrainMode::Vireskill);
    let embedder = HashedBagProvider::default();

    let recorder = Arc::new(RecordingBackend::new(Arc::new(scripted_backend(set.clone()))));
    let recorded = train(&cfg, &mut DeterministicEnv::new(set.clone()), &Clients::shared(recorder.clone()), &embedder)?;
    let path = std::env::temp_dir().join(format!("skillloop-fixture-{}.json", std::process::id()));
    recorder.save(&path)?;
    println!("recorded {} distinct responses to {}", recorder.recorded().len(), path.display());

    let fixture = Arc::new(FixtureBackend::load(&path)?);
    let replay_clients = Clients::shared(fixture);
    let replayed = train(&cfg, &mut DeterministicEnv::new(set.clone()), &replay_clients, &embedder)?;
    println!(
        "replay made {} fixture lookups; logs identical: {}; snapshots identical: {}",
        replay_clients.total_calls(),
        replayed.log == recorded.log,
        replayed.snapshots == recorded.snapshots
    );
    std::fs::remove_file(path)?;
    Ok(())
}
