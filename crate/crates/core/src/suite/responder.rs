//! Scripted language and vision models for the scenario suites.
//!
//! Every answer is a pure function of the request. The vision side reads the
//! `#fail:<marker>` tag the environment plants on the failing frame; the
//! language side looks tasks up by description and applies hazard fixes.

use std::sync::{Arc, OnceLock};

use regex::Regex;

use super::scenario::{Fix, Hazard, Scenario, ScenarioSet, GOAL_MARKER, LOGICAL_MARKER, SLIP_MARKER};
use crate::model::{template_ids, ChatRequest, ScriptedBackend};
use crate::planning::{parse_directives, render_plan};

/// One backend answering both roles for `set`.
pub fn scripted_backend(set: Arc<ScenarioSet>) -> ScriptedBackend {
    ScriptedBackend::new(format!("scripted:{}", set.name), move |req| respond(&set, req))
}

fn plan_answer(plan: &[String]) -> String {
    format!("Here is the plan:\n{}", render(plan))
}

fn task_for<'a>(set: &'a ScenarioSet, req: &ChatRequest) -> Option<&'a Scenario> {
    set.by_description(req.slot_value("task")?)
}

pub fn respond(set: &ScenarioSet, req: &ChatRequest) -> Option<String> {
    match req.template_id.as_str() {
        template_ids::PLAN => Some(plan_answer(&task_for(set, req)?.initial_plan)),
        template_ids::REGENERATE => {
            let task = task_for(set, req)?;
            Some(plan_answer(task.regenerated_plan.as_ref().unwrap_or(&task.initial_plan)))
        }
        template_ids::COMPOSE => Some(program_for(req.slot_value("directive")?)),
        template_ids::SUMMARIZE => Some(summary(req.slot_value("steps")?)),
        template_ids::LOCALIZE => localize(req),
        template_ids::DIAGNOSE => Some(diagnose(set, req)),
        template_ids::LOGICAL_REFLECT => Some(logical_reflection(req.slot_value("plan")?)),
        template_ids::REPLAN_EXECUTION => replan_execution(set, req),
        template_ids::REPLAN_LOGICAL => {
            let task = task_for(set, req)?;
            let plan = task
                .logical_fix_plan
                .as_ref()
                .or(task.regenerated_plan.as_ref())
                .unwrap_or(&task.initial_plan);
            Some(plan_answer(plan))
        }
        _ => None,
    }
}

fn quoted(s: &str) -> String {
    format!("'{}'", s.replace('\\', "\\\\").replace('\'', "\\'"))
}

/// A program in the style of an affordance-map composer.
pub fn program_for(directive: &str) -> String {
    let lower = directive.to_lowercase();
    let body = if lower.contains("open gripper") {
        "gripper = parse_query_obj('gripper')\nexecute(gripper, gripper_map=get_gripper_map('open everywhere'))".to_string()
    } else if lower.contains("back to default pose") {
        "reset_to_default_pose()".to_string()
    } else if let Some(object) = lower.strip_prefix("grasp ") {
        format!(
            "movable = parse_query_obj('gripper')\naffordance_map = get_affordance_map({})\ngripper_map = get_gripper_map({})\nexecute(movable, affordance_map=affordance_map, gripper_map=gripper_map)",
            quoted(&format!("a point at {object}")),
            quoted(&format!("open everywhere except 1cm around {object}")),
        )
    } else if let Some(target) = lower.strip_prefix("move to ") {
        format!(
            "movable = parse_query_obj('gripper')\naffordance_map = get_affordance_map({})\navoidance_map = get_avoidance_map('10cm from obstacles')\nexecute(movable, affordance_map=affordance_map, avoidance_map=avoidance_map)",
            quoted(target)
        )
    } else {
        format!("execute_instruction({})", quoted(directive))
    };
    format!("```python\n# {directive}\n{body}\n```")
}

fn summary(steps: &str) -> String {
    let actions: Vec<&str> = steps
        .lines()
        .filter_map(|l| l.split_once(": ").map(|(_, d)| d.trim()))
        .collect();
    format!("The robot will {}.", actions.join("; then "))
}

fn fail_marker(frames: &[String]) -> Option<(&str, Option<usize>)> {
    static STEP: OnceLock<Regex> = OnceLock::new();
    let step_re = STEP.get_or_init(|| Regex::new(r"/s(\d+)/").unwrap());
    frames.iter().find_map(|f| {
        let (label, marker) = f.split_once("#fail:")?;
        let step = step_re.captures(label).and_then(|c| c[1].parse().ok());
        Some((marker, step))
    })
}

fn localize(req: &ChatRequest) -> Option<String> {
    static CHUNK: OnceLock<Regex> = OnceLock::new();
    let chunk_re = CHUNK.get_or_init(|| Regex::new(r"^chunk (\d+) \| steps (\d+)-(\d+)").unwrap());
    let Some((_, Some(step))) = fail_marker(req.frames()) else {
        return Some("All actions executed successfully.\nfailed_chunk: none".into());
    };
    let table = req.slot_value("chunks")?;
    let chunk = table.lines().find_map(|line| {
        let caps = chunk_re.captures(line)?;
        let (index, first, last): (usize, usize, usize) =
            (caps[1].parse().ok()?, caps[2].parse().ok()?, caps[3].parse().ok()?);
        (first..=last).contains(&step).then_some(index)
    })?;
    Some(format!("The failure is visible in chunk {chunk}.\nfailed_chunk: {chunk}"))
}

fn reason_with_marker(reason: &str, marker: &str) -> String {
    format!("{reason} [marker: {marker}]")
}

fn diagnose(set: &ScenarioSet, req: &ChatRequest) -> String {
    match fail_marker(req.frames()) {
        Some((SLIP_MARKER, _)) => reason_with_marker(
            "the object slipped out of the gripper during the motion; the plan itself is sound",
            SLIP_MARKER,
        ),
        Some((marker, step)) => match failing_hazard(set, req, marker, step) {
            Some(h) => reason_with_marker(&h.reason, marker),
            None => reason_with_marker("the chunk failed for an unrecognized reason", marker),
        },
        None => reason_with_marker("no failure is visible in this chunk", "unknown"),
    }
}

/// The hazard behind a failure: among the hazards carrying `marker`, the one
/// triggered by the failing step's text.
fn failing_hazard<'a>(set: &'a ScenarioSet, req: &ChatRequest, marker: &str, step: Option<usize>) -> Option<&'a Hazard> {
    let task_id = req.frames().iter().find(|f| f.contains("#fail:"))?.split('/').next()?;
    let Some(task) = set.get(task_id) else {
        return set.hazard_by_marker(marker);
    };
    let step_text = step.and_then(|i| {
        let prefix = format!("step {i}: ");
        req.slot_value("steps")?
            .lines()
            .find_map(|l| l.trim().strip_prefix(prefix.as_str()).map(str::to_string))
    });
    let mut candidates = task.hazards.iter().filter(|h| h.marker == marker);
    match step_text {
        Some(text) => candidates
            .clone()
            .find(|h| h.triggered_by(&text))
            .or_else(|| candidates.next()),
        None => candidates.next(),
    }
}

fn grasp_object(step: &str) -> Option<String> {
    let lower = step.to_lowercase();
    let idx = lower.find("grasp ")?;
    Some(lower[idx + "grasp ".len()..].trim().to_string())
}

fn logical_reflection(plan: &str) -> String {
    let Ok(steps) = parse_directives(plan) else {
        return reason_with_marker("the plan could not be read", "unknown");
    };
    let mut held: Option<String> = None;
    for step in &steps {
        let lower = step.as_str().to_lowercase();
        if lower.contains("open gripper") {
            held = None;
        } else if let Some(object) = grasp_object(step.as_str()) {
            if let Some(previous) = held {
                return reason_with_marker(
                    &format!(
                        "the plan grasps {object} while still holding {previous}; release the held object with open gripper before grasping another"
                    ),
                    LOGICAL_MARKER,
                );
            }
            held = Some(object);
        }
    }
    reason_with_marker("every step ran but the plan does not accomplish all goals of the task", GOAL_MARKER)
}

fn marker_in(reason: &str) -> Option<&str> {
    let start = reason.rfind("[marker: ")? + "[marker: ".len();
    let end = reason[start..].find(']')? + start;
    Some(&reason[start..end])
}

/// Applies the hazard fix named by the diagnosis marker to the failed plan.
fn apply_fix(hazard: &Hazard, plan: Vec<String>, examples: &str) -> Vec<String> {
    let transferred = hazard
        .transfer_hint
        .as_ref()
        .is_none_or(|hint| examples.to_lowercase().contains(&hint.to_lowercase()));
    match &hazard.fix {
        Fix::ReplacePlan(fixed) if transferred => fixed.clone(),
        Fix::ReplaceStep(fixed) if transferred => replace_first_match(hazard, plan, fixed),
        _ => match &hazard.fallback_step {
            Some(fallback) => replace_first_match(hazard, plan, fallback),
            None => plan,
        },
    }
}

fn replace_first_match(hazard: &Hazard, mut plan: Vec<String>, with: &str) -> Vec<String> {
    if let Some(step) = plan.iter_mut().find(|s| hazard.matches(s)) {
        *step = with.to_string();
    }
    plan
}

fn replan_execution(set: &ScenarioSet, req: &ChatRequest) -> Option<String> {
    let task = task_for(set, req)?;
    let plan: Vec<String> = parse_directives(req.slot_value("plan")?)
        .ok()?
        .into_iter()
        .map(|d| d.as_str().to_string())
        .collect();
    let reason = req.slot_value("reason")?;
    let hazard = marker_in(reason).and_then(|m| {
        task.hazards
            .iter()
            .find(|h| h.marker == m && reason.contains(&h.reason))
            .or_else(|| task.hazard_by_marker(m))
    });
    let revised = match hazard {
        Some(hazard) => apply_fix(hazard, plan, req.slot_value("examples").unwrap_or("")),
        None => plan,
    };
    Some(plan_answer(&revised))
}

/// Renders a plan the way the scripted planner answers, for fixtures and docs.
pub fn render(plan: &[String]) -> String {
    let steps: Vec<_> = plan
        .iter()
        .filter_map(|s| crate::skill::SubtaskInstruction::new(s.as_str()).ok())
        .collect();
    render_plan(&steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> Arc<ScenarioSet> {
        ScenarioSet::deterministic()
    }

    #[test]
    fn plans_are_parseable() {
        let s = set();
        for task in &s.tasks {
            let req = ChatRequest::llm("plan").slot("examples", "(none)").slot("task", &task.description);
            let plan = parse_directives(&respond(&s, &req).unwrap()).unwrap();
            assert_eq!(plan.len(), task.initial_plan.len());
        }
        let unknown = ChatRequest::llm("plan").slot("examples", "(none)").slot("task", "juggle");
        assert_eq!(respond(&s, &unknown), None);
    }

    #[test]
    fn localize_reads_the_planted_marker() {
        let frames = vec!["t/s0/f0".to_string(), "t/s4/f4#fail:oversized-grasp".to_string()];
        let req = ChatRequest::vlm("localize", frames)
            .slot("chunks", "chunk 0 | steps 0-3 | frames 0-1 | a\nchunk 1 | steps 4-7 | frames 1-1 | b");
        assert_eq!(respond(&set(), &req).unwrap().lines().last().unwrap(), "failed_chunk: 1");
        let req = ChatRequest::vlm("localize", vec!["t/s0/f0".into()]).slot("chunks", "chunk 0 | steps 0-0 | x | y");
        assert!(respond(&set(), &req).unwrap().ends_with("failed_chunk: none"));
    }

    #[test]
    fn execution_replan_applies_the_fix() {
        let s = set();
        let task = s.get("needs-offset").unwrap();
        let plan = render(&task.initial_plan);
        let reason = diagnose(
            &s,
            &ChatRequest::vlm("diagnose", vec!["needs-offset/s0/f4#fail:grasp-miss".into()]),
        );
        assert!(reason.contains("adjust the grip"));
        let req = ChatRequest::llm("replan_execution")
            .slot("task", &task.description)
            .slot("plan", plan)
            .slot("reason", reason)
            .slot("examples", "(none)");
        let revised = parse_directives(&respond(&s, &req).unwrap()).unwrap();
        assert_eq!(revised[0].as_str(), "grasp the mug with a 3cm offset toward its handle");
        assert!(task.judge(&revised.iter().map(|d| d.as_str()).collect::<Vec<_>>()).success);
    }

    #[test]
    fn transfer_hazard_needs_an_example() {
        let s = ScenarioSet::transfer();
        let task = s.get("two-bowls").unwrap();
        let reason = "x [marker: oversized-grasp]".to_string();
        let ask = |examples: &str| {
            let req = ChatRequest::llm("replan_execution")
                .slot("task", &task.description)
                .slot("plan", render(&task.initial_plan))
                .slot("reason", &reason)
                .slot("examples", examples);
            parse_directives(&respond(&s, &req).unwrap()).unwrap()[0].as_str().to_string()
        };
        assert_eq!(ask("(none)"), "grasp the white bowl firmly");
        assert_eq!(
            ask("# Task: put the white bowl on the plate\ncomposer(\"grasp the white bowl by its edges\")"),
            "grasp the white bowl by its edges"
        );
    }

    #[test]
    fn logical_reflection_names_both_objects() {
        let plan = "composer(\"grasp the apple\")\ncomposer(\"grasp the banana\")";
        let reason = logical_reflection(plan);
        assert!(reason.contains("grasps the banana while still holding the apple"), "{reason}");
        assert_eq!(marker_in(&reason), Some(LOGICAL_MARKER));
    }

    #[test]
    fn compose_is_fenced_code() {
        let code = program_for("grasp the blue cup");
        assert!(code.starts_with("```python\n# grasp the blue cup\n"));
        assert!(code.contains("a point at the blue cup"));
    }
}
