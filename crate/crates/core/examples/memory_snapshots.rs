//! Commit skills into memory, freeze per-iteration snapshots and round-trip
//! the canonical memory file.
//!
//! Run with `cargo run --example memory_snapshots`.

use skillloop::memory::{self, SkillMemory, SnapshotStore};
use skillloop::skill::{Skill, SkillOrigin, TaskSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let press = TaskSpec::new("press-button", "press the red button")?;
    let drawer = TaskSpec::new("close-drawer", "close the top drawer")?;

    let mut mem = SkillMemory::with_tasks(["press-button", "close-drawer"]);
    let mut store = SnapshotStore::new(3);

    let skill = Skill::from_texts(&press, ["press the red button"], ["robot.press('button')"], SkillOrigin::Planned)?;
    mem.commit("press-button", skill)?;
    for id in ["press-button", "close-drawer"] {
        store.snapshot(1, id, &mem)?;
    }

    let skill = Skill::from_texts(
        &drawer,
        ["grasp the drawer handle", "push the drawer closed", "open gripper"],
        ["robot.grasp('handle')", "robot.push('drawer')", "robot.open_gripper()"],
        SkillOrigin::Replanned,
    )?;
    mem.commit("close-drawer", skill)?;
    for index in 2..=3 {
        for id in ["press-button", "close-drawer"] {
            store.snapshot(index, id, &mem)?;
        }
    }

    for index in store.indices() {
        let filled: Vec<&str> = ["press-button", "close-drawer"]
            .into_iter()
            .filter(|id| store.get(index, id).flatten().is_some())
            .collect();
        println!("snapshot {index}: skills for {filled:?}");
    }

    let dir = tempfile_dir()?;
    let path = dir.join("memory.json");
    memory::save(&path, &mem, &store)?;
    let (loaded_mem, loaded_store) = memory::load(&path)?;
    assert_eq!(loaded_mem, mem);
    assert_eq!(loaded_store, store);
    println!("round trip through {} preserved {} snapshots", path.display(), loaded_store.capacity());
    std::fs::remove_dir_all(dir)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("skillloop-memory-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
