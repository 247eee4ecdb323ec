//! Retrieve example skills for an unseen task through the task-description
//! and code-line similarity channels.
//!
//! Run with `cargo run --example retrieval_transfer`.

use skillloop::memory::SkillMemory;
use skillloop::retrieval::{retrieve, HashedBagProvider, RetrievalConfig, RetrievalQuery};
use skillloop::skill::{Skill, SkillOrigin};
use skillloop::suite::{program_for, ScenarioSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = ScenarioSet::transfer();
    let target = set.get("bowl-on-plate").expect("bundled transfer task");

    let mut mem = SkillMemory::new();
    for s in set.tasks.iter().filter(|s| s.id != target.id) {
        let skill = Skill::from_texts(&s.task(), &s.initial_plan, s.initial_plan.iter().map(|d| program_for(d)), SkillOrigin::Planned)?;
        mem.register(&s.id);
        mem.commit(&s.id, skill)?;
    }

    let draft = Skill::from_texts(
        &target.task(),
        &target.initial_plan,
        target.initial_plan.iter().map(|d| program_for(d)),
        SkillOrigin::Planned,
    )?;
    let query = RetrievalQuery {
        task_id: &target.id,
        description: &target.description,
        plan: draft.plan(),
    };
    let cfg = RetrievalConfig::default();
    let examples = retrieve(&query, &mem, &cfg, &HashedBagProvider::default())?;

    println!("query: {} ({} stored skills, k = {}, threshold = {})", target.description, mem.len(), cfg.k, cfg.threshold);
    for ex in &examples {
        println!("  {:<16} {:?}  score {:.4}  \"{}\"", ex.task_id, ex.channel, ex.score, ex.task_description);
    }
    Ok(())
}
