//! The lifelong training loop.
//!
//! For each round and each task, the loop starts from the stored skill when
//! memory has one and plans from the task description otherwise. Each
//! iteration executes the current skill once. A success is committed to
//! memory and the code is kept; a failure is reflected on and replanned
//! (except after the last iteration of a round). Memory is snapshotted after
//! every iteration, giving `rounds * iters_per_round` snapshots per task.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{self, MemoryError, SkillMemory, SnapshotStore};
use crate::model::{template_ids, Clients, ModelError};
use crate::planning::{self, PlanningError};
use crate::reflection::{self, FailureDiagnosis, ReflectionError, DEFAULT_FRAME_BUDGET};
use crate::retrieval::{self, EmbeddingProvider, RetrievalConfig, RetrievalError, RetrievalQuery, ScoredExample};
use crate::rollout::{rollout_with_retry, Environment, RolloutRecord, RolloutRequest, RolloutSummary, DEFAULT_TRANSPORT_RETRIES};
use crate::seeds;
use crate::skill::{Skill, SkillOrigin, TaskSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Reflection on the failure video plus retrieved skills.
    #[default]
    Vireskill,
    /// Regenerates a plan from scratch after every failure.
    Retry,
    /// Reflection without retrieved skills.
    NoSkillTransfer,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Vireskill, TrainMode::Retry, TrainMode::NoSkillTransfer];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Vireskill => "vireskill",
            TrainMode::Retry => "retry",
            TrainMode::NoSkillTransfer => "no_skill_transfer",
        }
    }

    fn uses_retrieval(self) -> bool {
        self == TrainMode::Vireskill
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected vireskill, retry or no_skill_transfer)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tasks: Vec<TaskSpec>,
    pub rounds: u32,
    pub iters_per_round: u32,
    pub mode: TrainMode,
    pub retrieval: RetrievalConfig,
    pub global_seed: u64,
    pub transport_retries: u32,
    pub frame_budget: usize,
}

impl TrainConfig {
    pub fn new(tasks: Vec<TaskSpec>, mode: TrainMode) -> Self {
        Self {
            tasks,
            rounds: 2,
            iters_per_round: 5,
            mode,
            retrieval: RetrievalConfig::default(),
            global_seed: 0,
            transport_retries: DEFAULT_TRANSPORT_RETRIES,
            frame_budget: DEFAULT_FRAME_BUDGET,
        }
    }

    pub fn snapshot_count(&self) -> u32 {
        self.rounds * self.iters_per_round
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.iters_per_round == 0 {
            return bad("iters_per_round must be at least 1".into());
        }
        if self.tasks.is_empty() {
            return bad("no tasks to train".into());
        }
        if self.frame_budget < 2 {
            return bad("frame_budget must be at least 2".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for t in &self.tasks {
            t.validate().map_err(|e| TrainError::Config(e.to_string()))?;
            if !ids.insert(t.id.as_str()) {
                return bad(format!("duplicate task id `{}`", t.id));
            }
        }
        self.retrieval.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Round start with the skill from memory.
    Reused,
    /// Fresh plan from the task description.
    Planned,
    /// Code revised after the previous iteration failed.
    Replanned,
    /// Same code as the previous iteration.
    Kept,
    /// Not executed because the environment failed earlier.
    Skipped,
}

/// Model calls made during one iteration, by purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCalls {
    pub plan: u64,
    pub compose: u64,
    pub summarize: u64,
    pub localize: u64,
    pub diagnose: u64,
    pub logical_reflect: u64,
    pub replan: u64,
    pub total: u64,
}

impl ModelCalls {
    pub fn from_counts(counts: &BTreeMap<String, u64>) -> Self {
        let get = |id: &str| counts.get(id).copied().unwrap_or(0);
        Self {
            plan: get(template_ids::PLAN),
            compose: get(template_ids::COMPOSE),
            summarize: get(template_ids::SUMMARIZE),
            localize: get(template_ids::LOCALIZE),
            diagnose: get(template_ids::DIAGNOSE),
            logical_reflect: get(template_ids::LOGICAL_REFLECT),
            replan: get(template_ids::REPLAN_EXECUTION) + get(template_ids::REPLAN_LOGICAL) + get(template_ids::REGENERATE),
            total: counts.values().sum(),
        }
    }

    pub fn add(&mut self, other: &ModelCalls) {
        self.plan += other.plan;
        self.compose += other.compose;
        self.summarize += other.summarize;
        self.localize += other.localize;
        self.diagnose += other.diagnose;
        self.logical_reflect += other.logical_reflect;
        self.replan += other.replan;
        self.total += other.total;
    }
}

fn count_delta(before: &BTreeMap<String, u64>, after: &BTreeMap<String, u64>) -> BTreeMap<String, u64> {
    after
        .iter()
        .filter_map(|(k, v)| {
            let d = v - before.get(k).copied().unwrap_or(0);
            (d > 0).then(|| (k.clone(), d))
        })
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub round: u32,
    pub k: u32,
    pub iteration: u32,
    pub task_id: String,
    pub seed: u64,
    pub action: Action,
    pub skill_hash: Option<String>,
    pub templates: Vec<String>,
    pub model_calls: ModelCalls,
    pub rollout: Option<RolloutSummary>,
    pub transport_retries: u32,
    pub diagnosis: Option<FailureDiagnosis>,
    pub committed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    /// One JSON object per line, in execution order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn for_task<'a>(&'a self, task_id: &'a str) -> impl Iterator<Item = &'a IterationRecord> + 'a {
        self.records.iter().filter(move |r| r.task_id == task_id)
    }

    pub fn get(&self, task_id: &str, iteration: u32) -> Option<&IterationRecord> {
        self.records
            .iter()
            .find(|r| r.task_id == task_id && r.iteration == iteration)
    }
}

/// Per-(task, iteration) model call counters.
pub fn model_call_accounting(log: &TrainLog) -> Vec<(String, u32, ModelCalls)> {
    log.records
        .iter()
        .map(|r| (r.task_id.clone(), r.iteration, r.model_calls))
        .collect()
}

pub fn total_model_calls(log: &TrainLog) -> ModelCalls {
    let mut total = ModelCalls::default();
    for r in &log.records {
        total.add(&r.model_calls);
    }
    total
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub memory: SkillMemory,
    pub snapshots: SnapshotStore,
    pub log: TrainLog,
}

pub const MEMORY_FILE: &str = "memory.json";
pub const LOG_FILE: &str = "train_log.jsonl";

impl TrainOutput {
    /// Writes `memory.json` (entries and snapshots) and `train_log.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        memory::save(&dir.join(MEMORY_FILE), &self.memory, &self.snapshots)?;
        memory::write_atomically(&dir.join(LOG_FILE), self.log.to_jsonl().as_bytes())?;
        Ok(())
    }
}

enum Setback {
    /// The iteration is spent but training goes on.
    Recoverable(String, Option<FailureDiagnosis>),
    Fatal(TrainError),
}

fn planning_setback(err: PlanningError) -> Setback {
    match err {
        PlanningError::Model(e) if !matches!(e, ModelError::Network { .. }) => Setback::Fatal(e.into()),
        other => Setback::Recoverable(format!("planning: {other}"), None),
    }
}

fn reflection_setback(err: ReflectionError, diagnosis: Option<FailureDiagnosis>) -> Setback {
    if err.is_fatal() {
        match err {
            ReflectionError::Model(e) | ReflectionError::Planning(PlanningError::Model(e)) => Setback::Fatal(e.into()),
            other => Setback::Recoverable(other.to_string(), diagnosis),
        }
    } else {
        Setback::Recoverable(format!("reflection: {err}"), diagnosis)
    }
}

pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    clients: &'a Clients,
    embedder: &'a dyn EmbeddingProvider,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, clients: &'a Clients, embedder: &'a dyn EmbeddingProvider) -> Self {
        Self { cfg, clients, embedder }
    }

    fn examples(&self, task: &TaskSpec, plan: &[crate::skill::SubtaskInstruction], memory: &SkillMemory) -> Result<Vec<ScoredExample>, TrainError> {
        if !self.cfg.mode.uses_retrieval() {
            return Ok(Vec::new());
        }
        let query = RetrievalQuery {
            task_id: &task.id,
            description: &task.description,
            plan,
        };
        Ok(retrieval::retrieve(&query, memory, &self.cfg.retrieval, self.embedder)?)
    }

    fn plan_fresh(&self, task: &TaskSpec, memory: &SkillMemory) -> Result<Skill, Setback> {
        let examples = self.examples(task, &[], memory).map_err(Setback::Fatal)?;
        planning::plan_skill(task, &self.clients.llm, &examples).map_err(planning_setback)
    }

    fn revise(
        &self,
        task: &TaskSpec,
        skill: &Skill,
        record: &RolloutRecord,
        memory: &SkillMemory,
    ) -> Result<(Skill, Option<FailureDiagnosis>), Setback> {
        if self.cfg.mode == TrainMode::Retry {
            let steps = planning::regenerate(task, &self.clients.llm).map_err(planning_setback)?;
            let units = planning::compose_all(&steps, &self.clients.llm, Some(skill)).map_err(planning_setback)?;
            let revised = planning::assemble(task, steps, units).map_err(planning_setback)?;
            return Ok((revised.with_origin(SkillOrigin::Replanned), None));
        }
        let diagnosis = reflection::reflect(task, skill, record, self.clients, self.cfg.frame_budget)
            .map_err(|e| reflection_setback(e, None))?;
        let examples = self.examples(task, skill.plan(), memory).map_err(Setback::Fatal)?;
        let revised = reflection::replan(task, skill, &diagnosis, &record.scene, &examples, &self.clients.llm)
            .map_err(|e| reflection_setback(e, Some(diagnosis.clone())))?;
        Ok((revised, Some(diagnosis)))
    }

    pub fn run(&self, env: &mut dyn Environment) -> Result<TrainOutput, TrainError> {
        let cfg = self.cfg;
        cfg.validate()?;
        let mut memory = SkillMemory::with_tasks(cfg.tasks.iter().map(|t| t.id.as_str()));
        let mut snapshots = SnapshotStore::new(cfg.snapshot_count());
        let mut log = TrainLog::default();
        let mut aborted: BTreeMap<String, String> = BTreeMap::new();

        for round in 1..=cfg.rounds {
            for task in &cfg.tasks {
                let mut code: Option<Skill> = memory.get(&task.id).map(|s| s.clone().with_origin(SkillOrigin::Reused));
                let mut next_action = Action::Reused;
                for k in 1..=cfg.iters_per_round {
                    let iteration = (round - 1) * cfg.iters_per_round + k;
                    let before = self.clients.log().by_template();
                    let seed = seeds::train_seed(cfg.global_seed, &task.id, round, k);
                    let mut rec = IterationRecord {
                        round,
                        k,
                        iteration,
                        task_id: task.id.clone(),
                        seed,
                        action: next_action,
                        skill_hash: None,
                        templates: Vec::new(),
                        model_calls: ModelCalls::default(),
                        rollout: None,
                        transport_retries: 0,
                        diagnosis: None,
                        committed: false,
                        error: None,
                    };
                    if let Some(reason) = aborted.get(&task.id) {
                        rec.action = Action::Skipped;
                        rec.error = Some(format!("skipped: {reason}"));
                    } else {
                        if code.is_none() {
                            rec.action = Action::Planned;
                            match self.plan_fresh(task, &memory) {
                                Ok(skill) => code = Some(skill.stamped(round, iteration)),
                                Err(Setback::Fatal(e)) => return Err(e),
                                Err(Setback::Recoverable(msg, _)) => rec.error = Some(msg),
                            }
                        }
                        if let Some(skill) = &code {
                            rec.skill_hash = Some(skill.content_hash());
                            let request = RolloutRequest::new(task.id.clone(), skill.clone(), seed);
                            match rollout_with_retry(env, &request, cfg.transport_retries) {
                                Err(e) => {
                                    tracing::error!(task = %task.id, iteration, error = %e, "environment failed; abandoning task");
                                    aborted.insert(task.id.clone(), format!("environment failure at iteration {iteration}"));
                                    rec.error = Some(format!("environment: {e}"));
                                }
                                Ok((record, retries)) => {
                                    rec.rollout = Some(record.summary());
                                    rec.transport_retries = retries;
                                    next_action = Action::Kept;
                                    if record.success {
                                        memory.commit(&task.id, skill.clone())?;
                                        rec.committed = true;
                                    } else if k < cfg.iters_per_round {
                                        match self.revise(task, skill, &record, &memory) {
                                            Ok((revised, diagnosis)) => {
                                                rec.diagnosis = diagnosis;
                                                code = Some(revised.stamped(round, iteration));
                                                next_action = Action::Replanned;
                                            }
                                            Err(Setback::Fatal(e)) => return Err(e),
                                            Err(Setback::Recoverable(msg, diagnosis)) => {
                                                rec.diagnosis = diagnosis;
                                                rec.error = Some(msg);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    snapshots.snapshot(iteration, &task.id, &memory)?;
                    let delta = count_delta(&before, &self.clients.log().by_template());
                    rec.templates = delta.keys().cloned().collect();
                    rec.model_calls = ModelCalls::from_counts(&delta);
                    tracing::info!(
                        task = %task.id,
                        round,
                        k,
                        action = ?rec.action,
                        success = rec.rollout.as_ref().map(|r| r.success),
                        calls = rec.model_calls.total,
                        "iteration"
                    );
                    log.records.push(rec);
                }
            }
        }
        Ok(TrainOutput {
            memory,
            snapshots,
            log,
        })
    }
}

pub fn train(
    cfg: &TrainConfig,
    env: &mut dyn Environment,
    clients: &Clients,
    embedder: &dyn EmbeddingProvider,
) -> Result<TrainOutput, TrainError> {
    Trainer::new(cfg, clients, embedder).run(env)
}

/// A store whose every snapshot holds each task's first plan, as produced by
/// planning once without examples. Evaluating it measures a planner that
/// never learns.
pub fn initial_plan_store(
    tasks: &[TaskSpec],
    clients: &Clients,
    snapshot_count: u32,
) -> Result<SnapshotStore, TrainError> {
    let mut store = SnapshotStore::new(snapshot_count);
    for task in tasks {
        let skill = match planning::plan_skill(task, &clients.llm, &[]) {
            Ok(s) => Some(s.stamped(1, 1)),
            Err(e) => match planning_setback(e) {
                Setback::Fatal(e) => return Err(e),
                Setback::Recoverable(msg, _) => {
                    tracing::warn!(task = %task.id, error = %msg, "no initial plan");
                    None
                }
            },
        };
        for index in 1..=snapshot_count {
            store.insert(index, &task.id, skill.clone())?;
        }
    }
    Ok(store)
}
