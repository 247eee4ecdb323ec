//! Drive an environment through the JSON-lines wire protocol, printing each
//! request line and the reply an executor sends back.
//!
//! Run with `cargo run --example wire_protocol`.

use std::io::Cursor;

use skillloop::rollout::protocol::{encode_request, serve, Request};
use skillloop::rollout::RolloutRequest;
use skillloop::skill::{Skill, SkillOrigin};
use skillloop::suite::{program_for, DeterministicEnv, ScenarioSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = ScenarioSet::deterministic();
    let s = set.get("press-button").expect("bundled task");
    let skill = Skill::from_texts(&s.task(), &s.initial_plan, s.initial_plan.iter().map(|d| program_for(d)), SkillOrigin::Planned)?;

    let requests = [
        Request::Describe { id: 1 },
        Request::Reset { id: 2 },
        Request::rollout(3, &RolloutRequest::new(&s.id, skill, 42)),
        Request::Shutdown { id: 4 },
    ];
    let input: String = requests.iter().map(|r| encode_request(r) + "\n").collect();

    let mut output = Vec::new();
    serve(&mut DeterministicEnv::new(set.clone()), Cursor::new(input.clone()), &mut output)?;

    for (request, reply) in input.lines().zip(String::from_utf8(output)?.lines()) {
        println!("-> {request}");
        println!("<- {}", shorten(reply, 160));
    }
    Ok(())
}

fn shorten(line: &str, max: usize) -> String {
    if line.chars().count() <= max {
        return line.to_string();
    }
    let cut: String = line.chars().take(max).collect();
    format!("{cut}...")
}
