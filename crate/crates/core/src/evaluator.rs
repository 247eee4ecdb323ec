//! Success-rate evaluation of memory snapshots.
//!
//! Every (task, snapshot) cell replays the stored skill `trials` times with
//! evaluation seeds and records `successes / trials`. A snapshot without a
//! skill scores 0. A cell whose environment keeps failing is reported as
//! missing rather than as 0. No model is consulted anywhere in evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::SnapshotStore;
use crate::rollout::{rollout_with_retry, EnvError, Environment, RolloutRequest, DEFAULT_TRANSPORT_RETRIES};
use crate::seeds;

pub const DEFAULT_TRIALS: u32 = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation settings: {0}")]
    Config(String),
    #[error("snapshot store has no entry for task `{task_id}` at snapshot {index}")]
    IncompleteStore { task_id: String, index: u32 },
    #[error("cannot open environment: {0}")]
    Environment(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalConfig {
    pub trials: u32,
    pub global_seed: u64,
    pub transport_retries: u32,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            global_seed: 0,
            transport_retries: DEFAULT_TRANSPORT_RETRIES,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Evaluated,
    NoSkill,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub successes: u32,
    pub trials: u32,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Cell {
    /// `successes / trials`, divided once; `None` for a missing cell.
    pub fn success_rate(&self) -> Option<f64> {
        match self.status {
            CellStatus::Missing => None,
            CellStatus::NoSkill => Some(0.0),
            CellStatus::Evaluated => Some(f64::from(self.successes) / f64::from(self.trials)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub task_id: String,
    pub snapshot: u32,
    pub trial: u32,
    pub seed: u64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub snapshot: u32,
    pub mean_success_rate: Option<f64>,
    pub tasks_counted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: u32,
    pub tasks: Vec<String>,
    pub snapshots: Vec<u32>,
    pub cells: BTreeMap<String, BTreeMap<u32, Cell>>,
    pub trial_records: Vec<TrialRecord>,
}

impl EvalReport {
    pub fn cell(&self, task_id: &str, snapshot: u32) -> Option<&Cell> {
        self.cells.get(task_id)?.get(&snapshot)
    }

    pub fn success_rate(&self, task_id: &str, snapshot: u32) -> Option<f64> {
        self.cell(task_id, snapshot)?.success_rate()
    }

    pub fn last_snapshot(&self) -> Option<u32> {
        self.snapshots.last().copied()
    }

    pub fn missing_cells(&self) -> Vec<(String, u32)> {
        self.cells
            .iter()
            .flat_map(|(task, row)| {
                row.iter()
                    .filter(|(_, c)| c.status == CellStatus::Missing)
                    .map(move |(s, _)| (task.clone(), *s))
            })
            .collect()
    }

    /// Mean success rate over tasks with a non-missing cell, per snapshot.
    pub fn curve(&self) -> Vec<CurvePoint> {
        self.snapshots
            .iter()
            .map(|&snapshot| {
                let rates: Vec<f64> = self
                    .tasks
                    .iter()
                    .filter_map(|t| self.success_rate(t, snapshot))
                    .collect();
                CurvePoint {
                    snapshot,
                    mean_success_rate: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
                    tasks_counted: rates.len(),
                }
            })
            .collect()
    }

    pub fn final_mean(&self) -> Option<f64> {
        self.curve().last()?.mean_success_rate
    }

    /// `task_id,1,2,...` then one row of success rates per task.
    pub fn matrix_csv(&self) -> String {
        let mut out = String::from("task_id");
        for s in &self.snapshots {
            write!(out, ",{s}").unwrap();
        }
        out.push('\n');
        for task in &self.tasks {
            out.push_str(task);
            for &s in &self.snapshots {
                out.push(',');
                out.push_str(&format_rate(self.success_rate(task, s)));
            }
            out.push('\n');
        }
        out
    }

    /// Learning curve: `iteration,<task...>,mean_sr`.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("iteration");
        for task in &self.tasks {
            write!(out, ",{task}").unwrap();
        }
        out.push_str(",mean_sr\n");
        for point in self.curve() {
            write!(out, "{}", point.snapshot).unwrap();
            for task in &self.tasks {
                out.push(',');
                out.push_str(&format_rate(self.success_rate(task, point.snapshot)));
            }
            out.push(',');
            out.push_str(&format_rate(point.mean_success_rate));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("reports serialize");
        text.push('\n');
        text
    }
}

fn format_rate(rate: Option<f64>) -> String {
    match rate {
        Some(r) => format!("{r:.4}"),
        None => "missing".to_string(),
    }
}

/// Final-snapshot success rates of several methods side by side, one row per
/// task plus the average.
pub fn summary_table(methods: &[(&str, &EvalReport)]) -> String {
    let Some((_, first)) = methods.first() else {
        return String::new();
    };
    let width = first.tasks.iter().map(String::len).max().unwrap_or(4).max("Average".len());
    let columns: Vec<usize> = methods.iter().map(|(name, _)| name.len().max(12)).collect();
    let mut out = format!("{:<width$}", "Task");
    for ((name, _), w) in methods.iter().zip(&columns) {
        write!(out, " | {name:>w$}").unwrap();
    }
    out.push('\n');
    out.push_str(&"-".repeat(width));
    for w in &columns {
        write!(out, "-|-{}", "-".repeat(*w)).unwrap();
    }
    out.push('\n');
    let cell = |r: Option<f64>| match r {
        Some(v) => format!("{v:.2}"),
        None => "n/a".into(),
    };
    for task in &first.tasks {
        write!(out, "{task:<width$}").unwrap();
        for ((_, report), w) in methods.iter().zip(&columns) {
            let rate = report.last_snapshot().and_then(|s| report.success_rate(task, s));
            write!(out, " | {:>w$}", cell(rate)).unwrap();
        }
        out.push('\n');
    }
    write!(out, "{:<width$}", "Average").unwrap();
    for ((_, report), w) in methods.iter().zip(&columns) {
        write!(out, " | {:>w$}", cell(report.final_mean())).unwrap();
    }
    out.push('\n');
    out
}

type TaskResult = (BTreeMap<u32, Cell>, Vec<TrialRecord>);

fn check(store: &SnapshotStore, tasks: &[String], cfg: &EvalConfig) -> Result<Vec<u32>, EvalError> {
    if cfg.trials == 0 {
        return Err(EvalError::Config("trials must be at least 1".into()));
    }
    let indices: Vec<u32> = store.indices().collect();
    for task in tasks {
        for &index in &indices {
            if store.get(index, task).is_none() {
                return Err(EvalError::IncompleteStore {
                    task_id: task.clone(),
                    index,
                });
            }
        }
    }
    if indices.is_empty() && !tasks.is_empty() {
        return Err(EvalError::IncompleteStore {
            task_id: tasks[0].clone(),
            index: 1,
        });
    }
    Ok(indices)
}

fn evaluate_task(store: &SnapshotStore, indices: &[u32], task: &str, env: &mut dyn Environment, cfg: &EvalConfig) -> TaskResult {
    let mut row = BTreeMap::new();
    let mut trials = Vec::new();
    for &index in indices {
        let Some(Some(skill)) = store.get(index, task) else {
            row.insert(
                index,
                Cell {
                    successes: 0,
                    trials: cfg.trials,
                    status: CellStatus::NoSkill,
                    error: None,
                },
            );
            continue;
        };
        let mut successes = 0u32;
        let mut cell_trials = Vec::new();
        let mut failure = None;
        for trial in 1..=cfg.trials {
            let seed = seeds::eval_seed(cfg.global_seed, task, index, trial);
            let request = RolloutRequest::new(task, skill.clone(), seed);
            match rollout_with_retry(env, &request, cfg.transport_retries) {
                Ok((record, _)) => {
                    successes += u32::from(record.success);
                    cell_trials.push(TrialRecord {
                        task_id: task.to_string(),
                        snapshot: index,
                        trial,
                        seed,
                        success: record.success,
                    });
                }
                Err(e) => {
                    tracing::error!(task, snapshot = index, error = %e, "cell could not be evaluated");
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        let cell = match failure {
            Some(error) => Cell {
                successes: 0,
                trials: cfg.trials,
                status: CellStatus::Missing,
                error: Some(error),
            },
            None => {
                trials.extend(cell_trials);
                Cell {
                    successes,
                    trials: cfg.trials,
                    status: CellStatus::Evaluated,
                    error: None,
                }
            }
        };
        row.insert(index, cell);
    }
    (row, trials)
}

fn assemble(tasks: &[String], indices: Vec<u32>, trials: u32, results: Vec<(String, TaskResult)>) -> EvalReport {
    let mut cells = BTreeMap::new();
    let mut by_task: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
    for (task, (row, records)) in results {
        cells.insert(task.clone(), row);
        by_task.insert(task, records);
    }
    let trial_records = tasks
        .iter()
        .flat_map(|t| by_task.remove(t).unwrap_or_default())
        .collect();
    EvalReport {
        trials,
        tasks: tasks.to_vec(),
        snapshots: indices,
        cells,
        trial_records,
    }
}

/// Evaluates every snapshot of every task in `tasks`, sequentially on one environment.
pub fn evaluate(
    store: &SnapshotStore,
    tasks: &[String],
    env: &mut dyn Environment,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let indices = check(store, tasks, cfg)?;
    let results = tasks
        .iter()
        .map(|t| (t.clone(), evaluate_task(store, &indices, t, env, cfg)))
        .collect();
    Ok(assemble(tasks, indices, cfg.trials, results))
}

/// Like [`evaluate`], spreading tasks over `cfg.jobs` workers that each open
/// their own environment. The report does not depend on the worker count.
pub fn evaluate_parallel<F>(
    store: &SnapshotStore,
    tasks: &[String],
    open_env: F,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError>
where
    F: Fn() -> Result<Box<dyn Environment>, EnvError> + Sync,
{
    let indices = check(store, tasks, cfg)?;
    let jobs = cfg.jobs.clamp(1, tasks.len().max(1));
    let queue: Vec<Vec<&String>> = (0..jobs)
        .map(|w| tasks.iter().skip(w).step_by(jobs).collect())
        .collect();
    let results = std::thread::scope(|scope| {
        let handles: Vec<_> = queue
            .into_iter()
            .map(|mine| {
                let indices = &indices;
                let open_env = &open_env;
                scope.spawn(move || -> Result<Vec<(String, TaskResult)>, EvalError> {
                    if mine.is_empty() {
                        return Ok(Vec::new());
                    }
                    let mut env = open_env()?;
                    let out = mine
                        .into_iter()
                        .map(|t| (t.clone(), evaluate_task(store, indices, t, env.as_mut(), cfg)))
                        .collect();
                    let _ = env.shutdown();
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(assemble(tasks, indices, cfg.trials, results.into_iter().flatten().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    type Row<'a> = (&'a str, &'a [(u32, u32, CellStatus)]);

    fn report(rates: &[Row]) -> EvalReport {
        let mut cells = BTreeMap::new();
        for (task, row) in rates {
            let row = row
                .iter()
                .enumerate()
                .map(|(i, &(successes, trials, status))| {
                    (
                        i as u32 + 1,
                        Cell {
                            successes,
                            trials,
                            status,
                            error: None,
                        },
                    )
                })
                .collect();
            cells.insert(task.to_string(), row);
        }
        EvalReport {
            trials: 5,
            tasks: rates.iter().map(|(t, _)| t.to_string()).collect(),
            snapshots: (1..=rates[0].1.len() as u32).collect(),
            cells,
            trial_records: vec![],
        }
    }

    #[test]
    fn cell_arithmetic() {
        let c = Cell {
            successes: 3,
            trials: 5,
            status: CellStatus::Evaluated,
            error: None,
        };
        assert_eq!(c.success_rate(), Some(0.6));
        let none = Cell {
            status: CellStatus::NoSkill,
            successes: 0,
            ..c.clone()
        };
        assert_eq!(none.success_rate(), Some(0.0));
        let missing = Cell {
            status: CellStatus::Missing,
            ..c
        };
        assert_eq!(missing.success_rate(), None);
    }

    #[test]
    fn curve_skips_missing_cells() {
        use CellStatus::*;
        let r = report(&[
            ("a", &[(0, 5, NoSkill), (5, 5, Evaluated)]),
            ("b", &[(2, 5, Evaluated), (0, 5, Missing)]),
        ]);
        let curve = r.curve();
        assert_eq!(curve[0].mean_success_rate, Some(0.2));
        assert_eq!(curve[1].mean_success_rate, Some(1.0));
        assert_eq!(curve[1].tasks_counted, 1);
        assert_eq!(r.missing_cells(), vec![("b".to_string(), 2)]);
        assert_eq!(r.matrix_csv(), "task_id,1,2\na,0.0000,1.0000\nb,0.4000,missing\n");
        assert!(r.curve_csv().starts_with("iteration,a,b,mean_sr\n1,0.0000,0.4000,0.2000\n"));
        let table = summary_table(&[("x", &r), ("y", &r)]);
        assert!(table.lines().last().unwrap().starts_with("Average"));
        assert!(table.contains("1.00"));
    }
}
