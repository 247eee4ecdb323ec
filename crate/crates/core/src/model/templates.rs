//! Prompt templates with `{{slot}}` placeholders.
//!
//! Built-in templates ship with the crate; a template directory can override
//! any of them by id (`<id>.txt`). The first line may carry `# version: N`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use thiserror::Error;

use super::template_ids;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown template `{0}`")]
    Unknown(String),
    #[error("template `{template}` needs slot `{slot}`")]
    MissingSlot { template: String, slot: String },
    #[error("cannot read template directory {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub version: u32,
    pub body: String,
}

impl Template {
    fn parse(id: &str, text: &str) -> Self {
        let mut version = 1;
        let mut body = text;
        if let Some(first) = text.lines().next() {
            if let Some(v) = first.strip_prefix("# version:") {
                version = v.trim().parse().unwrap_or(1);
                body = text[first.len()..].trim_start_matches(['\r', '\n']);
            }
        }
        Self {
            id: id.to_string(),
            version,
            body: body.to_string(),
        }
    }

    /// Slot names referenced by the body.
    pub fn slots(&self) -> BTreeSet<String> {
        slot_pattern()
            .captures_iter(&self.body)
            .map(|c| c[1].to_string())
            .collect()
    }

    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        let mut missing = None;
        let rendered = slot_pattern().replace_all(&self.body, |caps: &regex::Captures<'_>| {
            match slots.get(&caps[1]) {
                Some(value) => value.clone(),
                None => {
                    missing.get_or_insert_with(|| caps[1].to_string());
                    String::new()
                }
            }
        });
        match missing {
            Some(slot) => Err(TemplateError::MissingSlot {
                template: self.id.clone(),
                slot,
            }),
            None => Ok(rendered.into_owned()),
        }
    }

    /// `id@vN`, recorded in logs.
    pub fn tag(&self) -> String {
        format!("{}@v{}", self.id, self.version)
    }
}

fn slot_pattern() -> &'static Regex {
    static PATTERN: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"\{\{([a-z_]+)\}\}").unwrap())
}

const BUILTIN: [(&str, &str); 9] = [
    (template_ids::PLAN, include_str!("../../templates/plan.txt")),
    (template_ids::REGENERATE, include_str!("../../templates/regenerate.txt")),
    (template_ids::COMPOSE, include_str!("../../templates/compose.txt")),
    (template_ids::SUMMARIZE, include_str!("../../templates/summarize.txt")),
    (template_ids::LOCALIZE, include_str!("../../templates/localize.txt")),
    (template_ids::DIAGNOSE, include_str!("../../templates/diagnose.txt")),
    (template_ids::LOGICAL_REFLECT, include_str!("../../templates/logical_reflect.txt")),
    (template_ids::REPLAN_EXECUTION, include_str!("../../templates/replan_execution.txt")),
    (template_ids::REPLAN_LOGICAL, include_str!("../../templates/replan_logical.txt")),
];

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, text)| (id.to_string(), Template::parse(id, text)))
            .collect();
        Self { templates }
    }

    /// Built-ins overridden by any `<id>.txt` found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for id in template_ids::ALL {
            let path = dir.join(format!("{id}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                set.templates.insert(id.to_string(), Template::parse(id, &text));
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> Result<&Template, TemplateError> {
        self.templates.get(id).ok_or_else(|| TemplateError::Unknown(id.to_string()))
    }

    pub fn render(&self, id: &str, slots: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        self.get(id)?.render(slots)
    }
}
