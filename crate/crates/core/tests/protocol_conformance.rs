//! The wire protocol as seen by an external executor, exercised against the
//! `skillloop serve` binary and the shared scenario fixture files.

use std::io::{BufRead, BufReader, Cursor, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde_json::Value;
use skillloop::cli;
use skillloop::rollout::protocol::{encode_request, serve, Request, PROTOCOL_VERSION};
use skillloop::rollout::transport::WireEnvironment;
use skillloop::rollout::{EnvSpec, Environment, RolloutRequest};
use skillloop::skill::{Skill, SkillOrigin};
use skillloop::suite::{program_for, DeterministicEnv, Fix, Scenario, ScenarioSet, StochasticEnv};

const BIN: &str = env!("CARGO_BIN_EXE_skillloop");

fn serve_command(env: &str) -> String {
    format!("{BIN} serve --env {env}")
}

fn skill(s: &Scenario, plan: &[String]) -> Skill {
    Skill::from_texts(&s.task(), plan, plan.iter().map(|d| program_for(d)), SkillOrigin::Planned).unwrap()
}

/// Every plan the fixture mentions for a scenario, including plans with each fix applied.
fn fixture_plans(s: &Scenario) -> Vec<Vec<String>> {
    let mut plans = vec![s.initial_plan.clone()];
    plans.extend(s.regenerated_plan.clone());
    plans.extend(s.logical_fix_plan.clone());
    let mut all_fixed = s.initial_plan.clone();
    for h in &s.hazards {
        match &h.fix {
            Fix::ReplacePlan(p) => plans.push(p.clone()),
            Fix::ReplaceStep(step) => {
                if let Some(slot) = all_fixed.iter_mut().find(|d| h.matches(d)) {
                    *slot = step.clone();
                }
            }
        }
    }
    plans.push(all_fixed);
    plans
}

#[test]
fn served_rollouts_are_field_identical_to_the_builtin_environment() {
    for (name, set) in [("deterministic", ScenarioSet::deterministic()), ("transfer", ScenarioSet::transfer())] {
        let mut wire = WireEnvironment::spawn(&serve_command(&format!("builtin:{name}")), Duration::from_secs(20)).unwrap();
        let mut local = DeterministicEnv::new(set.clone());
        assert_eq!(wire.describe().unwrap(), local.describe().unwrap());
        wire.reset().unwrap();
        for s in &set.tasks {
            for (i, plan) in fixture_plans(s).iter().enumerate() {
                let request = RolloutRequest::new(&s.id, skill(s, plan), i as u64);
                assert_eq!(wire.rollout(&request).unwrap(), local.rollout(&request).unwrap(), "{} plan {i}", s.id);
            }
        }
        wire.shutdown().unwrap();
    }
}

#[test]
fn stochastic_outcomes_survive_the_wire() {
    let set = ScenarioSet::deterministic();
    let mut wire = WireEnvironment::spawn(&serve_command("builtin:stochastic"), Duration::from_secs(20)).unwrap();
    let mut local = StochasticEnv::new(set.clone(), Default::default(), skillloop::suite::DEFAULT_SUCCESS_P, 0);
    let s = set.get("press-button").unwrap();
    let mut successes = 0;
    for seed in 0..40 {
        let request = RolloutRequest::new(&s.id, skill(s, &s.initial_plan), seed);
        let record = wire.rollout(&request).unwrap();
        successes += u32::from(record.success);
        assert_eq!(record, local.rollout(&request).unwrap());
    }
    assert!(successes > 0 && successes < 40);
    wire.shutdown().unwrap();
}

fn raw_session(lines: &[&str]) -> Vec<Value> {
    let mut child = Command::new(BIN)
        .args(["serve", "--env", "builtin:deterministic"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    for line in lines {
        writeln!(stdin, "{line}").unwrap();
    }
    drop(stdin);
    let replies = BufReader::new(child.stdout.take().unwrap())
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect();
    assert!(child.wait().unwrap().success());
    replies
}

#[test]
fn raw_lines_get_one_reply_each_in_order() {
    let replies = raw_session(&[
        r#"{"op":"describe","id":1}"#,
        r#"{"op":"reset","id":2}"#,
        r#"{"op":"teleport","id":3}"#,
        r#"not json"#,
        r#"{"op":"rollout","id":5,"task_id":"press-button","seed":0,"skill":{"plan":["press the red button"],"programs":["press()"]}}"#,
        r#"{"op":"rollout","id":6,"task_id":"no-such-task","seed":0,"skill":{"plan":["x"],"programs":["y"]}}"#,
        r#"{"op":"shutdown","id":7}"#,
        r#"{"op":"describe","id":8}"#,
    ]);
    assert_eq!(replies.len(), 7, "nothing is answered after shutdown");
    assert_eq!(replies[0]["id"], 1);
    assert_eq!(replies[0]["protocol_version"], PROTOCOL_VERSION);
    assert_eq!(replies[0]["tasks"].as_array().unwrap().len(), 6);
    assert_eq!(replies[1], serde_json::json!({"id": 2, "ok": true}));
    assert_eq!((replies[2]["id"].as_u64(), replies[2]["ok"].as_bool()), (Some(3), Some(false)));
    assert!(replies[2]["error"].as_str().unwrap().contains("teleport"));
    assert_eq!((replies[3]["id"].as_u64(), replies[3]["ok"].as_bool()), (Some(0), Some(false)));
    let rollout = &replies[4];
    assert_eq!(rollout["success"], 1);
    assert_eq!(rollout["step_boundaries"], serde_json::json!([[0, 0, 4]]));
    assert_eq!(rollout["frames"].as_array().unwrap().len(), 5);
    assert_eq!(rollout["env_note"], "ok");
    assert!(rollout["halted_at_step"].is_null());
    assert_eq!(replies[5]["ok"], false);
    assert_eq!(replies[6], serde_json::json!({"id": 7, "ok": true}));
}

#[test]
fn in_process_serve_matches_the_binary() {
    let requests = [
        Request::Describe { id: 1 },
        Request::Reset { id: 2 },
        Request::rollout(3, &{
            let set = ScenarioSet::deterministic();
            let s = set.get("two-cups").unwrap().clone();
            RolloutRequest::new(&s.id, skill(&s, &s.initial_plan), 9)
        }),
        Request::Shutdown { id: 4 },
    ];
    let input: String = requests.iter().map(|r| encode_request(r) + "\n").collect();
    let mut output = Vec::new();
    serve(&mut DeterministicEnv::new(ScenarioSet::deterministic()), Cursor::new(input.clone()), &mut output).unwrap();
    let local: Vec<Value> = String::from_utf8(output)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let lines: Vec<&str> = input.lines().collect();
    assert_eq!(raw_session(&lines), local);
    assert_eq!(local[2]["env_note"], "fail marker=both-cups-center step=7");
}

#[test]
fn tcp_executor_serves_the_same_replies() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(BIN)
        .args(["serve", "--env", "builtin:deterministic", "--listen", &addr])
        .spawn()
        .unwrap();
    let spec: EnvSpec = format!("tcp:{addr}").parse().unwrap();
    let mut wire = None;
    for _ in 0..100 {
        match spec.open_external(Duration::from_secs(20)) {
            Ok(env) => {
                wire = Some(env);
                break;
            }
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
    let mut wire = wire.expect("executor never started listening");
    let set = ScenarioSet::deterministic();
    let s = set.get("needs-offset").unwrap();
    let request = RolloutRequest::new(&s.id, skill(s, &s.initial_plan), 1);
    assert_eq!(wire.rollout(&request).unwrap(), DeterministicEnv::new(set.clone()).rollout(&request).unwrap());
    wire.shutdown().unwrap();
    assert!(child.wait().unwrap().success());
}

#[test]
fn protocol_check_passes_against_the_served_suite() {
    let mut out = Vec::new();
    let code = cli::run_args(
        ["skillloop", "protocol-check", "--env", &format!("cmd:{}", serve_command("builtin:transfer"))],
        &mut out,
    );
    let text = String::from_utf8(out).unwrap();
    assert_eq!(code, 0, "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("ok rollout")).count(), 7);
    assert!(text.lines().all(|l| l.starts_with("ok")));

    let code = cli::run_args(["skillloop", "protocol-check", "--env", "cmd:exit 0"], &mut Vec::new());
    assert_eq!(code, 3);
}

#[test]
fn scenario_fixture_files_are_the_bundled_suites() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let det = ScenarioSet::load(&dir.join("deterministic_suite.json")).unwrap();
    let transfer = ScenarioSet::load(&dir.join("transfer_suite.json")).unwrap();
    assert_eq!(&det, ScenarioSet::deterministic().as_ref());
    assert_eq!(&transfer, ScenarioSet::transfer().as_ref());
    assert_eq!(det.task_ids().len(), 6);
    assert_eq!(transfer.task_ids().len(), 7);
}
