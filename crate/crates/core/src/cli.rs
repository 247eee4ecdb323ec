//! Command-line interface behind the `skillloop` binary.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 environment or transport failure, 4 model fixture miss.

use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{BackendKind, Config, ConfigError};
use crate::evaluator::{self, EvalError};
use crate::memory::{self, MemoryError};
use crate::model::ModelError;
use crate::rollout::protocol::{self, PROTOCOL_VERSION};
use crate::rollout::{rollout_with_retry, EnvError, EnvSpec, Environment, RolloutRequest};
use crate::skill::{Skill, SkillOrigin, TaskSpec};
use crate::trainer::{self, TrainError, TrainMode, TrainOutput};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "eval_report.json";
pub const MATRIX_FILE: &str = "eval_matrix.csv";
pub const CURVE_FILE: &str = "learning_curve.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Eval(EvalError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("{0}")]
    Other(String),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(ConfigError::Invalid(m)),
            TrainError::Model(m) => CliError::Model(m),
            other => CliError::Train(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) => CliError::Config(ConfigError::Invalid(m)),
            EvalError::Environment(env) => CliError::Env(env),
            other => CliError::Eval(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Env(_) => 3,
            CliError::Model(ModelError::FixtureMiss { .. }) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "skillloop", version, about = "Learn, reflect on and replay robot skills")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train skills and write memory, snapshots and the iteration log.
    Train(TrainArgs),
    /// Measure success rates of every memory snapshot.
    Eval(EvalArgs),
    /// Execute one stored skill and print the rollout summary.
    Replay(ReplayArgs),
    /// Inspect or export a memory file.
    #[command(subcommand)]
    Memory(MemoryCommand),
    /// Exercise every operation of an external executor once.
    ProtocolCheck(ProtocolCheckArgs),
    /// Serve a builtin environment over the wire protocol.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Environment: builtin:<name>, cmd:<command> or tcp:<host:port>.
    #[arg(long)]
    pub env: Option<EnvSpec>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub rounds: Option<u32>,
    #[arg(long)]
    pub iters_per_round: Option<u32>,
    /// Comma-separated task ids.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// Parent directory of the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write directly into this directory instead of `<out>/run-<hash>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Memory file produced by `train`.
    #[arg(long)]
    pub memory: PathBuf,
    #[arg(long)]
    pub trials: Option<u32>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Directory for the report; defaults to the memory file's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub memory: PathBuf,
    #[arg(long)]
    pub task: String,
    /// Snapshot index; defaults to the final memory.
    #[arg(long)]
    pub snapshot: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum MemoryCommand {
    /// Print the skills of the final memory or of one snapshot.
    Show {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        snapshot: Option<u32>,
    },
    /// Rewrite a memory file in canonical form.
    Export {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ProtocolCheckArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Listen on this TCP address instead of stdin/stdout.
    #[arg(long)]
    pub listen: Option<String>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_args(args, &mut std::io::stdout().lock())
}

/// Like [`main_with_args`], writing command output to `out`.
pub fn run_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn load_config(common: &Common) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(env) = &common.env {
        cfg.env.spec = env.clone();
    }
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    memory::write_atomically(path, text.as_bytes())?;
    Ok(())
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    let w = |e: std::io::Error| CliError::Other(e.to_string());
    match command {
        Command::Train(args) => {
            let mut cfg = load_config(&args.common)?;
            if let Some(mode) = args.mode {
                cfg.train.mode = mode;
            }
            if let Some(r) = args.rounds {
                cfg.train.rounds = r;
            }
            if let Some(i) = args.iters_per_round {
                cfg.train.iters_per_round = i;
            }
            if let Some(tasks) = args.tasks {
                cfg.train.tasks = tasks;
            }
            if let Some(b) = args.backend {
                cfg.model.backend = b;
            }
            if let Some(f) = args.fixture {
                cfg.model.fixture = Some(f);
            }
            if let Some(o) = args.out {
                cfg.run.out_dir = o;
            }
            let dir = args.run_dir.unwrap_or_else(|| cfg.run_dir());
            let output = train(&cfg, &dir)?;
            let calls = trainer::total_model_calls(&output.log);
            writeln!(out, "run directory: {}", dir.display()).map_err(w)?;
            writeln!(
                out,
                "mode {}: {} tasks, {} skills in memory, {} model calls",
                cfg.train.mode,
                output.memory.len(),
                output.memory.skills().count(),
                calls.total
            )
            .map_err(w)?;
            Ok(())
        }
        Command::Eval(args) => {
            let mut cfg = load_config(&args.common)?;
            if let Some(t) = args.trials {
                cfg.eval.trials = t;
            }
            if let Some(j) = args.jobs {
                cfg.eval.jobs = j;
            }
            cfg.validate()?;
            let (_, store) = memory::load(&args.memory)?;
            let tasks = store.task_ids();
            let report = evaluator::evaluate_parallel(&store, &tasks, || cfg.open_env(), &cfg.eval_config())?;
            let dir = args
                .out
                .or_else(|| args.memory.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
            write_file(&dir.join(REPORT_FILE), &report.to_json())?;
            write_file(&dir.join(MATRIX_FILE), &report.matrix_csv())?;
            write_file(&dir.join(CURVE_FILE), &report.curve_csv())?;
            write!(out, "{}", evaluator::summary_table(&[("success rate", &report)])).map_err(w)?;
            let missing = report.missing_cells();
            if !missing.is_empty() {
                return Err(CliError::Env(EnvError::Transport(format!(
                    "{} cells could not be evaluated",
                    missing.len()
                ))));
            }
            Ok(())
        }
        Command::Replay(args) => {
            let cfg = load_config(&args.common)?;
            cfg.validate()?;
            let (mem, store) = memory::load(&args.memory)?;
            let skill = match args.snapshot {
                Some(i) => store.get(i, &args.task).flatten(),
                None => mem.get(&args.task),
            }
            .ok_or_else(|| CliError::Other(format!("no stored skill for task `{}`", args.task)))?
            .clone();
            let mut env = cfg.open_env()?;
            let request = RolloutRequest::new(&args.task, skill, cfg.run.seed);
            let (record, _) = rollout_with_retry(env.as_mut(), &request, cfg.env.transport_retries)?;
            let _ = env.shutdown();
            writeln!(out, "{}", serde_json::to_string_pretty(&record.summary()).expect("serializable")).map_err(w)?;
            Ok(())
        }
        Command::Memory(MemoryCommand::Show { memory: path, snapshot }) => {
            let (mem, store) = memory::load(&path)?;
            let entries: Vec<(String, Option<Skill>)> = match snapshot {
                Some(i) => store
                    .snapshots()
                    .get(&i)
                    .ok_or_else(|| CliError::Other(format!("no snapshot {i}")))?
                    .iter()
                    .map(|(t, s)| (t.clone(), s.clone()))
                    .collect(),
                None => mem.entries().iter().map(|(t, s)| (t.clone(), s.clone())).collect(),
            };
            for (task, skill) in entries {
                match skill {
                    None => writeln!(out, "{task}: no skill").map_err(w)?,
                    Some(skill) => {
                        writeln!(out, "{task}: {} steps", skill.len()).map_err(w)?;
                        for (i, step) in skill.plan().iter().enumerate() {
                            writeln!(out, "  {}. {}", i + 1, step.as_str()).map_err(w)?;
                        }
                    }
                }
            }
            Ok(())
        }
        Command::Memory(MemoryCommand::Export { memory: path, out: target }) => {
            let (mem, store) = memory::load(&path)?;
            memory::save(&target, &mem, &store)?;
            writeln!(out, "wrote {}", target.display()).map_err(w)?;
            Ok(())
        }
        Command::ProtocolCheck(args) => {
            let cfg = load_config(&args.common)?;
            cfg.validate()?;
            let mut env = cfg.open_env()?;
            for line in protocol_check(env.as_mut())? {
                writeln!(out, "{line}").map_err(w)?;
            }
            Ok(())
        }
        Command::Serve(args) => {
            let cfg = load_config(&args.common)?;
            cfg.validate()?;
            let EnvSpec::Builtin(_) = &cfg.env.spec else {
                return Err(ConfigError::Invalid("serve only hosts builtin environments".into()).into());
            };
            let mut env = cfg.open_env()?;
            match args.listen {
                None => {
                    let stdin = std::io::stdin();
                    protocol::serve(env.as_mut(), stdin.lock(), std::io::stdout().lock()).map_err(w)
                }
                Some(addr) => {
                    let listener = TcpListener::bind(&addr).map_err(|e| CliError::Other(format!("{addr}: {e}")))?;
                    tracing::info!(addr = %listener.local_addr().map_err(w)?, "listening");
                    let (stream, _) = listener.accept().map_err(w)?;
                    let reader = BufReader::new(stream.try_clone().map_err(w)?);
                    protocol::serve(env.as_mut(), reader, stream).map_err(w)
                }
            }
        }
    }
}

/// Trains with `cfg` and writes config, memory and log into `dir`.
pub fn train(cfg: &Config, dir: &Path) -> Result<TrainOutput, CliError> {
    cfg.validate()?;
    let clients = cfg.clients()?;
    let embedder = cfg.embedder()?;
    let mut env = cfg.open_env()?;
    let description = env.describe()?;
    let tasks = cfg.select_tasks(description.tasks)?;
    let train_cfg = cfg.train_config(tasks);
    let output = trainer::train(&train_cfg, env.as_mut(), &clients, embedder.as_ref());
    let _ = env.shutdown();
    let output = output?;
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    output.save(dir)?;
    Ok(output)
}

/// Runs describe, reset, one rollout per advertised task and shutdown,
/// returning one `ok`/`FAIL` line per step.
pub fn protocol_check(env: &mut dyn Environment) -> Result<Vec<String>, CliError> {
    let mut lines = Vec::new();
    let description = env.describe()?;
    let version_ok = description.protocol_version == PROTOCOL_VERSION;
    lines.push(format!(
        "{} describe: {} offers {} tasks, protocol version {}",
        if version_ok { "ok" } else { "FAIL" },
        description.name,
        description.tasks.len(),
        description.protocol_version
    ));
    env.reset()?;
    lines.push("ok reset".to_string());
    let mut failures = usize::from(!version_ok);
    for task in &description.tasks {
        let skill = probe_skill(task)?;
        match env.rollout(&RolloutRequest::new(&task.id, skill, 0)) {
            Ok(record) => lines.push(format!(
                "ok rollout {}: success={} frames={} note={}",
                task.id,
                u8::from(record.success),
                record.video.len(),
                record.env_note
            )),
            Err(e) => {
                failures += 1;
                lines.push(format!("FAIL rollout {}: {e}", task.id));
            }
        }
    }
    env.shutdown()?;
    lines.push("ok shutdown".to_string());
    if failures > 0 {
        return Err(CliError::Env(EnvError::Transport(format!(
            "{failures} protocol checks failed:\n{}",
            lines.join("\n")
        ))));
    }
    Ok(lines)
}

fn probe_skill(task: &TaskSpec) -> Result<Skill, CliError> {
    Skill::from_texts(
        task,
        ["open gripper"],
        ["```python\nrobot.open_gripper()\n```"],
        SkillOrigin::Planned,
    )
    .map_err(|e| CliError::Other(e.to_string()))
}
