//! Run configuration loaded from TOML.
//!
//! Every section is optional and unknown keys are rejected. The resolved
//! configuration is hashed to name the run directory, so two runs with the
//! same settings write to the same place.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluator::{EvalConfig, DEFAULT_TRIALS};
use crate::model::{
    Clients, FixtureBackend, ModelBackend, ModelError, RecordingBackend, RemoteBackend, RemoteConfig, TemplateSet,
};
use crate::reflection::DEFAULT_FRAME_BUDGET;
use crate::retrieval::{EmbeddingProvider, HashedBagProvider, RemoteEmbeddingProvider, RetrievalConfig, DEFAULT_DIM};
use crate::rollout::{EnvError, EnvSpec, Environment, DEFAULT_TIMEOUT, DEFAULT_TRANSPORT_RETRIES};
use crate::skill::TaskSpec;
use crate::suite::{self, BuiltinOptions, ScenarioSet};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Answers derived from the scenario table; no network.
    Scripted,
    /// Answers replayed from a recorded fixture file.
    Fixture,
    /// Remote answers, persisted to the fixture file as they arrive.
    Record,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "fixture" => Ok(Self::Fixture),
            "record" => Ok(Self::Record),
            "remote" => Ok(Self::Remote),
            other => Err(format!("unknown backend `{other}` (expected scripted, fixture, record or remote)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub spec: EnvSpec,
    pub timeout_secs: u64,
    pub transport_retries: u32,
    pub builtin: BuiltinOptions,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            spec: EnvSpec::Builtin("deterministic".into()),
            timeout_secs: DEFAULT_TIMEOUT.as_secs(),
            transport_retries: DEFAULT_TRANSPORT_RETRIES,
            builtin: BuiltinOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub rounds: u32,
    pub iters_per_round: u32,
    pub frame_budget: usize,
    /// Task ids to train; empty means every task the environment offers.
    pub tasks: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Vireskill,
            rounds: 2,
            iters_per_round: 5,
            frame_budget: DEFAULT_FRAME_BUDGET,
            tasks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub trials: u32,
    pub jobs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backend: BackendKind,
    pub fixture: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backend: BackendKind::Scripted,
            fixture: None,
            templates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: EmbedderKind,
    pub dim: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            provider: EmbedderKind::Hashed,
            dim: DEFAULT_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub env: EnvSection,
    pub train: TrainSection,
    pub retrieval: RetrievalConfig,
    pub eval: EvalSection,
    pub model: ModelSection,
    pub embedding: EmbeddingSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            field: e.path().to_string(),
            message: e.inner().message().trim().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.env.builtin.validate().map_err(ConfigError::Invalid)?;
        if let EnvSpec::Builtin(name) = &self.env.spec {
            if !suite::BUILTIN_NAMES.contains(&name.as_str()) {
                return bad(format!(
                    "unknown builtin environment `{name}` (expected one of {})",
                    suite::BUILTIN_NAMES.join(", ")
                ));
            }
        }
        if self.env.timeout_secs == 0 {
            return bad("env.timeout_secs must be positive".into());
        }
        if self.train.rounds == 0 || self.train.iters_per_round == 0 {
            return bad("train.rounds and train.iters_per_round must be positive".into());
        }
        if self.train.frame_budget < 2 {
            return bad("train.frame_budget must be at least 2".into());
        }
        if self.eval.trials == 0 {
            return bad("eval.trials must be positive".into());
        }
        if self.eval.jobs == 0 {
            return bad("eval.jobs must be positive".into());
        }
        if self.embedding.dim == 0 {
            return bad("embedding.dim must be positive".into());
        }
        if matches!(self.model.backend, BackendKind::Fixture | BackendKind::Record) && self.model.fixture.is_none() {
            return bad("model.fixture is required for the fixture and record backends".into());
        }
        self.retrieval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// First 12 hex digits of SHA-256 over the resolved TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.out_dir.join(format!("run-{}", self.hash()))
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.env.timeout_secs)
    }

    /// Scenario table backing builtin environments and scripted models.
    pub fn scenarios(&self) -> Result<Arc<ScenarioSet>, ConfigError> {
        let name = match &self.env.spec {
            EnvSpec::Builtin(name) => name.as_str(),
            _ => "deterministic",
        };
        suite::builtin_scenarios(name, &self.env.builtin).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn open_env(&self) -> Result<Box<dyn Environment>, EnvError> {
        match &self.env.spec {
            EnvSpec::Builtin(name) => {
                suite::open_builtin(name, &self.env.builtin).map_err(|e| EnvError::Transport(e.to_string()))
            }
            external => Ok(Box::new(external.open_external(self.timeout())?)),
        }
    }

    pub fn templates(&self) -> Result<TemplateSet, ModelError> {
        match &self.model.templates {
            Some(dir) => Ok(TemplateSet::from_dir(dir)?),
            None => Ok(TemplateSet::builtin()),
        }
    }

    pub fn clients(&self) -> Result<Clients, ConfigError> {
        let invalid = |e: ModelError| ConfigError::Invalid(e.to_string());
        let fixture_path = || self.model.fixture.clone().expect("validated");
        let backend: Arc<dyn ModelBackend> = match self.model.backend {
            BackendKind::Scripted => Arc::new(suite::scripted_backend(self.scenarios()?)),
            BackendKind::Fixture => Arc::new(FixtureBackend::load(&fixture_path()).map_err(invalid)?),
            BackendKind::Remote => Arc::new(self.remote()?),
            BackendKind::Record => {
                Arc::new(RecordingBackend::new(Arc::new(self.remote()?)).persist_to(fixture_path()))
            }
        };
        Ok(Clients::shared(backend))
    }

    fn remote(&self) -> Result<RemoteBackend, ConfigError> {
        let invalid = |e: ModelError| ConfigError::Invalid(e.to_string());
        let remote = RemoteConfig::from_env().map_err(invalid)?;
        Ok(RemoteBackend::new(remote, self.templates().map_err(invalid)?))
    }

    pub fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>, ConfigError> {
        Ok(match self.embedding.provider {
            EmbedderKind::Hashed => Box::new(HashedBagProvider::new(self.embedding.dim)),
            EmbedderKind::Remote => Box::new(
                RemoteEmbeddingProvider::from_env(self.embedding.dim)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        })
    }

    /// Keeps the tasks named in `train.tasks`, in that order, or all of them.
    pub fn select_tasks(&self, offered: Vec<TaskSpec>) -> Result<Vec<TaskSpec>, ConfigError> {
        if self.train.tasks.is_empty() {
            return Ok(offered);
        }
        self.train
            .tasks
            .iter()
            .map(|id| {
                offered
                    .iter()
                    .find(|t| &t.id == id)
                    .cloned()
                    .ok_or_else(|| ConfigError::Invalid(format!("environment offers no task `{id}`")))
            })
            .collect()
    }

    pub fn train_config(&self, tasks: Vec<TaskSpec>) -> TrainConfig {
        TrainConfig {
            tasks,
            rounds: self.train.rounds,
            iters_per_round: self.train.iters_per_round,
            mode: self.train.mode,
            retrieval: self.retrieval,
            global_seed: self.run.seed,
            transport_retries: self.env.transport_retries,
            frame_budget: self.train.frame_budget,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            trials: self.eval.trials,
            global_seed: self.run.seed,
            transport_retries: self.env.transport_retries,
            jobs: self.eval.jobs,
        }
    }
}
