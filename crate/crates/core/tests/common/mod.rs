//! Oracles and fixtures shared by the integration tests and the acceptance run.
//!
//! Nothing here calls into the library's scoring, sampling or seeding code;
//! each oracle recomputes its quantity from the definition.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use skillloop::memory::{SkillMemory, SnapshotStore};
use skillloop::model::{Clients, FixtureBackend, RecordingBackend};
use skillloop::retrieval::{EmbedError, EmbeddingProvider, EmbeddingVector, HashedBagProvider, RetrievalConfig};
use skillloop::rollout::Environment;
use skillloop::skill::{Skill, SkillOrigin, TaskSpec};
use skillloop::suite::{scripted_backend, DeterministicEnv, ScenarioSet};
use skillloop::trainer::{train, TrainConfig, TrainMode, TrainOutput};

/// Embeddings looked up from a fixed table; unknown text embeds to zero.
pub struct TableProvider {
    pub dim: usize,
    pub table: HashMap<String, Vec<f64>>,
}

impl EmbeddingProvider for TableProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        match self.table.get(text) {
            Some(v) => EmbeddingVector::normalized(v.clone()),
            None => Ok(EmbeddingVector::zeros(self.dim)),
        }
    }
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Scores equal to twelve decimal places are ties.
pub fn tie_grid(score: f64) -> i64 {
    (score * 1e12).round() as i64
}

#[derive(Debug, Clone)]
pub struct OracleEntry {
    pub id: String,
    pub description: String,
    pub plan: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub dim: usize,
    pub table: HashMap<String, Vec<f64>>,
    pub entries: Vec<OracleEntry>,
    pub query_id: String,
    pub query_description: String,
    pub query_plan: Vec<String>,
    pub cfg: RetrievalConfig,
}

impl Instance {
    pub fn provider(&self) -> TableProvider {
        TableProvider {
            dim: self.dim,
            table: self.table.clone(),
        }
    }

    pub fn memory(&self) -> SkillMemory {
        let mut memory = SkillMemory::with_tasks(self.entries.iter().map(|e| e.id.clone()));
        for e in &self.entries {
            let task = TaskSpec::new(&e.id, &e.description).unwrap();
            let skill = Skill::from_texts(&task, &e.plan, e.plan.iter().map(|_| "run()"), SkillOrigin::Planned).unwrap();
            memory.commit(&e.id, skill).unwrap();
        }
        memory
    }

    fn vector(&self, text: &str) -> Vec<f64> {
        self.table.get(text).cloned().unwrap_or_else(|| vec![0.0; self.dim])
    }

    /// Exhaustive mixed-similarity retrieval: `(task_id, score, is_task_channel)`.
    pub fn oracle(&self) -> Vec<(String, f64, bool)> {
        let candidates: Vec<&OracleEntry> = self
            .entries
            .iter()
            .filter(|e| !(self.cfg.exclude_self && e.id == self.query_id))
            .collect();
        let half = self.cfg.k.div_ceil(2);
        let rank = |mut v: Vec<(f64, String)>| {
            v.sort_by(|a, b| tie_grid(b.0).cmp(&tie_grid(a.0)).then(a.1.cmp(&b.1)));
            v.truncate(half);
            v
        };
        let q = self.vector(&self.query_description);
        let task_channel: Vec<(f64, String)> = rank(
            candidates
                .iter()
                .map(|e| (oracle_cosine(&q, &self.vector(&e.description)), e.id.clone()))
                .collect(),
        )
        .into_iter()
        .filter(|(s, _)| *s > self.cfg.threshold)
        .collect();
        let code_channel: Vec<(f64, String)> = if self.query_plan.is_empty() {
            Vec::new()
        } else {
            rank(
                candidates
                    .iter()
                    .map(|e| {
                        let total: f64 = self
                            .query_plan
                            .iter()
                            .map(|d| {
                                e.plan
                                    .iter()
                                    .map(|line| oracle_cosine(&self.vector(d), &self.vector(line)))
                                    .fold(f64::NEG_INFINITY, f64::max)
                            })
                            .sum();
                        (total / self.query_plan.len() as f64, e.id.clone())
                    })
                    .collect(),
            )
        };
        let mut merged: BTreeMap<String, (f64, bool)> = BTreeMap::new();
        for (s, id) in task_channel {
            merged.insert(id, (s, true));
        }
        for (s, id) in code_channel {
            let keep_task = merged.get(&id).is_some_and(|(existing, _)| tie_grid(*existing) >= tie_grid(s));
            if !keep_task {
                merged.insert(id, (s, false));
            }
        }
        let mut out: Vec<(String, f64, bool)> = merged.into_iter().map(|(id, (s, c))| (id, s, c)).collect();
        out.sort_by(|a, b| tie_grid(b.1).cmp(&tie_grid(a.1)).then(a.0.cmp(&b.0)));
        out
    }
}

/// A random memory of at most 10 entries over a vocabulary of random
/// vectors of dimension at most 16. Texts repeat, so exact score ties occur.
pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let dim = rng.gen_range(2..=16);
    let vocab_size = rng.gen_range(3..=14);
    let vocab: Vec<String> = (0..vocab_size).map(|i| format!("text {i}")).collect();
    let table = vocab
        .iter()
        .map(|t| {
            let v: Vec<f64> = if rng.gen_bool(0.08) {
                vec![0.0; dim]
            } else {
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            (t.clone(), v)
        })
        .collect();
    let pick = |rng: &mut R| vocab[rng.gen_range(0..vocab.len())].clone();
    let n = rng.gen_range(0..=10);
    let entries: Vec<OracleEntry> = (0..n)
        .map(|i| OracleEntry {
            id: format!("task-{i:02}"),
            description: pick(rng),
            plan: (0..rng.gen_range(1..=6)).map(|_| pick(rng)).collect(),
        })
        .collect();
    let query_id = if n > 0 && rng.gen_bool(0.5) {
        entries[rng.gen_range(0..n)].id.clone()
    } else {
        "query".to_string()
    };
    let cfg = RetrievalConfig {
        k: 2 * rng.gen_range(1..=4),
        threshold: if rng.gen_bool(0.5) { 0.5 } else { rng.gen_range(-1.0..=1.0) },
        exclude_self: rng.gen_bool(0.8),
    };
    Instance {
        dim,
        table,
        entries,
        query_id,
        query_description: pick(rng),
        query_plan: (0..rng.gen_range(0..=6)).map(|_| pick(rng)).collect(),
        cfg,
    }
}

/// Reference splitmix64: state advances by the golden gamma, output is the
/// standard two-multiply finalizer.
pub struct OracleSplitMix(pub u64);

impl OracleSplitMix {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / 9_007_199_254_740_992.0
    }
}

/// Uniform sampling oracle: `round(i * (n - 1) / (target - 1))`.
pub fn oracle_sample(n: usize, target: usize) -> Vec<usize> {
    if n <= target {
        return (0..n).collect();
    }
    (0..target)
        .map(|i| (i as f64 * (n - 1) as f64 / (target - 1) as f64).round() as usize)
        .collect()
}

/// A suite with `n` one-step tasks that always succeed deterministically.
pub fn flat_suite(n: usize) -> Arc<ScenarioSet> {
    let tasks: Vec<serde_json::Value> = (0..n)
        .map(|i| {
            serde_json::json!({
                "id": format!("flat-{i}"),
                "description": format!("press button number {i}"),
                "scene": [{"name": "button", "position": [0.0, 0.0, 0.0], "scale": [0.05, 0.05, 0.02]}],
                "goal": ["press"],
                "initial_plan": ["press the button"],
            })
        })
        .collect();
    let json = serde_json::json!({"version": 1, "name": "flat", "frames_per_step": 2, "tasks": tasks});
    Arc::new(ScenarioSet::from_json(&json.to_string()).unwrap())
}

/// A store where every snapshot of every task holds the same one-step skill.
pub fn constant_store(set: &ScenarioSet, snapshots: u32) -> SnapshotStore {
    let mut store = SnapshotStore::new(snapshots);
    for s in &set.tasks {
        let skill = Skill::from_texts(&s.task(), &s.initial_plan, s.initial_plan.iter().map(|_| "run()"), SkillOrigin::Planned)
            .unwrap();
        for i in 1..=snapshots {
            store.insert(i, &s.id, Some(skill.clone())).unwrap();
        }
    }
    store
}

/// Records the scripted answers of one training run, keyed by request fingerprint.
pub fn record_answers(set: &Arc<ScenarioSet>, mode: TrainMode) -> BTreeMap<String, String> {
    let recorder = Arc::new(RecordingBackend::new(Arc::new(scripted_backend(set.clone()))));
    train_with(set, mode, &Clients::shared(recorder.clone()));
    recorder.recorded()
}

pub fn fixture_clients(set: &Arc<ScenarioSet>, mode: TrainMode) -> Clients {
    Clients::shared(Arc::new(FixtureBackend::new(record_answers(set, mode))))
}

/// Trains `mode` on `set` with the given clients and a fresh deterministic environment.
pub fn train_with(set: &Arc<ScenarioSet>, mode: TrainMode, clients: &Clients) -> TrainOutput {
    let cfg = TrainConfig::new(set.task_specs(), mode);
    let mut env = DeterministicEnv::new(set.clone());
    let out = train(&cfg, &mut env, clients, &HashedBagProvider::default()).unwrap();
    env.shutdown().unwrap();
    out
}

pub fn scripted_clients(set: &Arc<ScenarioSet>) -> Clients {
    Clients::shared(Arc::new(scripted_backend(set.clone())))
}
