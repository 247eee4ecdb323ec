//! Task decomposition and program composition through the language model.
//!
//! The planner answers with lines of the form `composer("<directive>")`;
//! every such call is extracted in order and anything else is ignored.
//! Each directive is then composed into one program unit.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::model::{template_ids, ChatRequest, ModelClient, ModelError};
use crate::retrieval::ScoredExample;
use crate::skill::{InvariantError, ProgramUnit, Skill, SkillOrigin, SubtaskInstruction, TaskSpec};

#[derive(Debug, Error)]
pub enum PlanningError {
    #[error("model response contains no composer directives: {raw:?}")]
    NoDirectives { raw: String },
    #[error("malformed composer directive on line {line}: {raw:?}")]
    Unparseable { line: usize, raw: String },
    #[error("directive {index} is invalid ({reason}): {raw:?}")]
    InvalidDirective { index: usize, reason: String, raw: String },
    #[error("composition of step {step_index} failed: {message}")]
    Composition { step_index: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

impl PlanningError {
    /// Errors caused by the content of a model answer rather than by the model call.
    pub fn is_parse_failure(&self) -> bool {
        matches!(
            self,
            PlanningError::NoDirectives { .. }
                | PlanningError::Unparseable { .. }
                | PlanningError::InvalidDirective { .. }
                | PlanningError::Composition { .. }
                | PlanningError::Invariant(_)
        )
    }
}

fn directive_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r#"composer\(\s*"((?:[^"\\]|\\.)*)"\s*\)"#).unwrap())
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Extracts every `composer("...")` directive from a model response, in order.
pub fn parse_directives(raw: &str) -> Result<Vec<SubtaskInstruction>, PlanningError> {
    let mut plan = Vec::new();
    for (line_no, line) in raw.lines().enumerate() {
        let mut matched = 0;
        for caps in directive_pattern().captures_iter(line) {
            matched += 1;
            let text = unescape(&caps[1]);
            let directive = SubtaskInstruction::new(text.trim()).map_err(|err| PlanningError::InvalidDirective {
                index: plan.len(),
                reason: err.to_string(),
                raw: raw.to_string(),
            })?;
            plan.push(directive);
        }
        if line.matches("composer(").count() > matched {
            return Err(PlanningError::Unparseable {
                line: line_no + 1,
                raw: raw.to_string(),
            });
        }
    }
    if plan.is_empty() {
        return Err(PlanningError::NoDirectives { raw: raw.to_string() });
    }
    Ok(plan)
}

/// Plan lines in the planner's own output format.
pub fn render_plan(plan: &[SubtaskInstruction]) -> String {
    plan.iter()
        .map(|d| format!("composer(\"{}\")", escape(d.as_str())))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Retrieved examples as prompt text; `(none)` when empty.
pub fn render_examples(examples: &[ScoredExample]) -> String {
    if examples.is_empty() {
        return "(none)".to_string();
    }
    examples
        .iter()
        .map(|ex| format!("# Task: {}\n{}", ex.task_description, render_plan(ex.skill.plan())))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Decomposes a task into subtask directives; examples precede the task in the prompt.
pub fn plan(
    task: &TaskSpec,
    llm: &ModelClient,
    examples: &[ScoredExample],
) -> Result<Vec<SubtaskInstruction>, PlanningError> {
    let request = ChatRequest::llm(template_ids::PLAN)
        .slot("examples", render_examples(examples))
        .slot("task", &task.description);
    let response = llm.complete(&request)?;
    parse_directives(&response.text)
}

/// Plans from scratch with no examples and no failure context.
pub fn regenerate(task: &TaskSpec, llm: &ModelClient) -> Result<Vec<SubtaskInstruction>, PlanningError> {
    let request = ChatRequest::llm(template_ids::REGENERATE).slot("task", &task.description);
    parse_directives(&llm.complete(&request)?.text)
}

fn extract_code(raw: &str) -> &str {
    if let Some(start) = raw.find("```") {
        let after = &raw[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        let end = body.find("```").unwrap_or(body.len());
        return body[..end].trim();
    }
    raw.trim()
}

pub fn compose(
    directive: &SubtaskInstruction,
    step_index: usize,
    llm: &ModelClient,
) -> Result<ProgramUnit, PlanningError> {
    let request = ChatRequest::llm(template_ids::COMPOSE).slot("directive", directive.as_str());
    let response = llm.complete(&request).map_err(|err| match err {
        ModelError::FixtureMiss { .. } => PlanningError::Model(err),
        other => PlanningError::Composition {
            step_index,
            message: other.to_string(),
        },
    })?;
    let code = extract_code(&response.text);
    ProgramUnit::new(step_index, code).map_err(|_| PlanningError::Composition {
        step_index,
        message: "empty program".into(),
    })
}

/// Composes every step sequentially. Directives already present in `previous`
/// keep their program unit and cost no model call.
pub fn compose_all(
    plan: &[SubtaskInstruction],
    llm: &ModelClient,
    previous: Option<&Skill>,
) -> Result<Vec<ProgramUnit>, PlanningError> {
    let known: HashMap<&str, &str> = previous
        .map(|s| {
            s.plan()
                .iter()
                .zip(s.programs())
                .map(|(d, p)| (d.as_str(), p.text.as_str()))
                .collect()
        })
        .unwrap_or_default();
    plan.iter()
        .enumerate()
        .map(|(i, d)| match known.get(d.as_str()) {
            Some(text) => Ok(ProgramUnit::new(i, *text)?),
            None => compose(d, i, llm),
        })
        .collect()
}

pub fn assemble(
    task: &TaskSpec,
    plan: Vec<SubtaskInstruction>,
    units: Vec<ProgramUnit>,
) -> Result<Skill, PlanningError> {
    Ok(Skill::new(task, plan, units, SkillOrigin::Planned)?)
}

/// plan → compose each step → assemble.
pub fn plan_skill(task: &TaskSpec, llm: &ModelClient, examples: &[ScoredExample]) -> Result<Skill, PlanningError> {
    let steps = plan(task, llm, examples)?;
    let units = compose_all(&steps, llm, None)?;
    assemble(task, steps, units)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{Clients, ScriptedBackend};

    fn d(s: &str) -> SubtaskInstruction {
        SubtaskInstruction::new(s).unwrap()
    }

    fn clients(f: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static) -> Clients {
        Clients::shared(Arc::new(ScriptedBackend::new("test", f)))
    }

    #[test]
    fn parses_directives_inside_prose() {
        let raw = "Sure, here is the plan:\n```python\ncomposer(\"grasp the blue cup\")\ncomposer(\"open gripper\")\n```\nDone.";
        let plan = parse_directives(raw).unwrap();
        assert_eq!(plan, vec![d("grasp the blue cup"), d("open gripper")]);
    }

    #[test]
    fn parses_escaped_quotes_and_multiple_per_line() {
        let plan = parse_directives(r#"composer("move to the \"left\" bin"); composer("open gripper")"#).unwrap();
        assert_eq!(plan, vec![d("move to the \"left\" bin"), d("open gripper")]);
        assert_eq!(parse_directives(&render_plan(&plan)).unwrap(), plan);
    }

    #[test]
    fn zero_directives_is_an_error() {
        assert!(matches!(
            parse_directives("I cannot help with that."),
            Err(PlanningError::NoDirectives { .. })
        ));
        assert!(matches!(parse_directives(""), Err(PlanningError::NoDirectives { .. })));
    }

    #[test]
    fn malformed_directive_is_not_silently_dropped() {
        let raw = "composer(\"grasp the cup\")\ncomposer(\"open gripper";
        assert!(matches!(
            parse_directives(raw),
            Err(PlanningError::Unparseable { line: 2, .. })
        ));
        assert!(matches!(
            parse_directives("composer(\"\")"),
            Err(PlanningError::InvalidDirective { index: 0, .. })
        ));
        assert!(matches!(
            parse_directives("composer(\"a\\nb\")"),
            Err(PlanningError::InvalidDirective { .. })
        ));
    }

    #[test]
    fn compose_extracts_code_and_reports_step_index() {
        let c = clients(|req| match req.slot_value("directive") {
            Some("open gripper") => Some("```python\nopen_gripper()\n```".into()),
            Some("fail") => Some("   ".into()),
            _ => None,
        });
        let unit = compose(&d("open gripper"), 2, &c.llm).unwrap();
        assert_eq!(unit.text, "open_gripper()");
        assert_eq!(unit.step_index, 2);
        assert!(matches!(
            compose(&d("fail"), 1, &c.llm),
            Err(PlanningError::Composition { step_index: 1, .. })
        ));
    }

    #[test]
    fn batch_compose_indexes_and_reuses_known_steps() {
        let c = clients(|req| req.slot_value("directive").map(|s| format!("run({s:?})")));
        let plan = vec![d("a"), d("b"), d("c")];
        let units = compose_all(&plan, &c.llm, None).unwrap();
        assert_eq!(units.iter().map(|u| u.step_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(c.total_calls(), 3);
        let task = TaskSpec::new("t", "x").unwrap();
        let skill = assemble(&task, plan, units).unwrap();
        let revised = vec![d("a"), d("z"), d("c")];
        let units = compose_all(&revised, &c.llm, Some(&skill)).unwrap();
        assert_eq!(c.total_calls(), 4);
        assert_eq!(units[1].text, "run(\"z\")");
    }

    #[test]
    fn assemble_checks_lengths() {
        let task = TaskSpec::new("t", "x").unwrap();
        let units = vec![ProgramUnit::new(0, "a()").unwrap(), ProgramUnit::new(1, "b()").unwrap()];
        assert_eq!(assemble(&task, vec![d("a"), d("b")], units.clone()).unwrap().len(), 2);
        assert!(assemble(&task, vec![d("a"), d("b")], units[..1].to_vec()).is_err());
        assert!(assemble(&task, vec![], vec![]).is_err());
    }

    #[test]
    fn examples_are_serialized_into_the_plan_prompt() {
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let sink = seen.clone();
        let c = clients(move |req| {
            sink.lock().unwrap().push(req.slots.clone());
            Some("composer(\"open gripper\")".into())
        });
        let task = TaskSpec::new("t", "release the cube").unwrap();
        let stored = Skill::from_texts(&task, ["grasp the cube"], ["grasp()"], SkillOrigin::Planned).unwrap();
        let ex = ScoredExample {
            task_id: "s".into(),
            task_description: "lift the cube".into(),
            skill: stored,
            score: 0.9,
            channel: crate::retrieval::Channel::TaskSim,
        };
        plan(&task, &c.llm, &[ex]).unwrap();
        let slots = &seen.lock().unwrap()[0];
        assert!(slots["examples"].contains("# Task: lift the cube"));
        assert!(slots["examples"].contains("composer(\"grasp the cube\")"));
        assert_eq!(slots["task"], "release the cube");
    }
}
