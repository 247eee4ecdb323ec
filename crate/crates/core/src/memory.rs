//! Task-indexed skill memory with per-iteration snapshots and persistence.
//!
//! The memory holds at most one verified skill per task. After every training
//! iteration the trainer freezes a deep copy of the task's entry into the
//! [`SnapshotStore`]; evaluation reads only those frozen copies.
//!
//! On disk both live in one canonical JSON document:
//!
//! ```text
//! { "entries": { task_id: skill | null, .. },
//!   "snapshots": { "1": { task_id: skill | null, .. }, .. },
//!   "version": 1 }
//! ```
//!
//! Object keys are sorted lexicographically, so identical state always
//! produces identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skill::{InvariantError, Skill};

pub const MEMORY_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SNAPSHOT_COUNT: u32 = 10;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("skill rejected for task {task_id}: {source}")]
    InvalidSkill {
        task_id: String,
        #[source]
        source: InvariantError,
    },
    #[error("skill belongs to task {found}, not {expected}")]
    TaskMismatch { expected: String, found: String },
    #[error("snapshot {index} already written for task {task_id}")]
    DuplicateSnapshot { index: u32, task_id: String },
    #[error("snapshot index {index} outside 1..={capacity}")]
    SnapshotOutOfRange { index: u32, capacity: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed memory file at line {line}, column {column}, field `{field}`: {message}")]
    Parse {
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("unsupported memory file version {0}")]
    UnsupportedVersion(u32),
}

/// What a commit did to the memory entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitOutcome {
    Inserted,
    Replaced,
    /// Same plan and programs; only origin/creation metadata changed.
    Refreshed,
    Unchanged,
}

/// Current skill per task. Entries move from `None` to a skill and are only
/// ever replaced by another skill.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkillMemory {
    entries: BTreeMap<String, Option<Skill>>,
}

impl SkillMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Memory with a `null` entry registered for each task.
    pub fn with_tasks<I, S>(task_ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries = task_ids.into_iter().map(|id| (id.into(), None)).collect();
        Self { entries }
    }

    pub fn register(&mut self, task_id: &str) {
        self.entries.entry(task_id.to_string()).or_insert(None);
    }

    pub fn get(&self, task_id: &str) -> Option<&Skill> {
        self.entries.get(task_id).and_then(Option::as_ref)
    }

    /// Stores a skill whose latest rollout succeeded. The caller vouches for success.
    pub fn commit(&mut self, task_id: &str, skill: Skill) -> Result<CommitOutcome, MemoryError> {
        skill.validate().map_err(|source| MemoryError::InvalidSkill {
            task_id: task_id.to_string(),
            source,
        })?;
        if skill.task_id() != task_id {
            return Err(MemoryError::TaskMismatch {
                expected: task_id.to_string(),
                found: skill.task_id().to_string(),
            });
        }
        let slot = self.entries.entry(task_id.to_string()).or_insert(None);
        let outcome = match slot {
            None => CommitOutcome::Inserted,
            Some(current) if *current == skill => CommitOutcome::Unchanged,
            Some(current) if current.same_content(&skill) => CommitOutcome::Refreshed,
            Some(_) => CommitOutcome::Replaced,
        };
        if outcome != CommitOutcome::Unchanged {
            *slot = Some(skill);
        }
        Ok(outcome)
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Non-null entries in task id order.
    pub fn skills(&self) -> impl Iterator<Item = (&str, &Skill)> {
        self.entries
            .iter()
            .filter_map(|(id, skill)| skill.as_ref().map(|s| (id.as_str(), s)))
    }

    pub fn entries(&self) -> &BTreeMap<String, Option<Skill>> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Frozen per-iteration copies of memory entries, keyed by iteration index `1..=capacity`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotStore {
    capacity: u32,
    snapshots: BTreeMap<u32, BTreeMap<String, Option<Skill>>>,
}

impl Default for SnapshotStore {
    fn default() -> Self {
        Self::new(DEFAULT_SNAPSHOT_COUNT)
    }
}

impl SnapshotStore {
    pub fn new(capacity: u32) -> Self {
        Self {
            capacity,
            snapshots: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    /// Freezes the current entry of `task_id` under index `index`.
    pub fn snapshot(&mut self, index: u32, task_id: &str, memory: &SkillMemory) -> Result<(), MemoryError> {
        self.insert(index, task_id, memory.get(task_id).cloned())
    }

    /// Writes an explicit entry. Used for baseline stores built without training.
    pub fn insert(&mut self, index: u32, task_id: &str, skill: Option<Skill>) -> Result<(), MemoryError> {
        if index == 0 || index > self.capacity {
            return Err(MemoryError::SnapshotOutOfRange {
                index,
                capacity: self.capacity,
            });
        }
        let slot = self.snapshots.entry(index).or_default();
        if slot.contains_key(task_id) {
            return Err(MemoryError::DuplicateSnapshot {
                index,
                task_id: task_id.to_string(),
            });
        }
        slot.insert(task_id.to_string(), skill);
        Ok(())
    }

    /// `None` when the snapshot was never written; `Some(None)` when it holds null.
    pub fn get(&self, index: u32, task_id: &str) -> Option<Option<&Skill>> {
        self.snapshots
            .get(&index)
            .and_then(|slot| slot.get(task_id))
            .map(Option::as_ref)
    }

    pub fn is_written(&self, index: u32, task_id: &str) -> bool {
        self.get(index, task_id).is_some()
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.snapshots.keys().copied()
    }

    pub fn task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .snapshots
            .values()
            .flat_map(|slot| slot.keys().cloned())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// True when every index `1..=capacity` is written for every given task.
    pub fn is_complete_for<'a>(&self, task_ids: impl IntoIterator<Item = &'a str>) -> bool {
        task_ids
            .into_iter()
            .all(|id| (1..=self.capacity).all(|k| self.is_written(k, id)))
    }

    pub fn snapshots(&self) -> &BTreeMap<u32, BTreeMap<String, Option<Skill>>> {
        &self.snapshots
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryDocument {
    version: u32,
    entries: SkillMemory,
    snapshot_capacity: u32,
    snapshots: BTreeMap<u32, BTreeMap<String, Option<Skill>>>,
}

/// Canonical text form of a memory and its snapshots.
pub fn to_canonical_string(memory: &SkillMemory, store: &SnapshotStore) -> String {
    let doc = MemoryDocument {
        version: MEMORY_FORMAT_VERSION,
        entries: memory.clone(),
        snapshot_capacity: store.capacity,
        snapshots: store.snapshots.clone(),
    };
    // Going through `Value` sorts every object's keys, struct fields included.
    let value = serde_json::to_value(&doc).expect("memory document is always representable as JSON");
    let mut text = serde_json::to_string_pretty(&value).expect("JSON value always serializes");
    text.push('\n');
    text
}

pub fn from_canonical_str(text: &str) -> Result<(SkillMemory, SnapshotStore), MemoryError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let doc: MemoryDocument = serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let field = err.path().to_string();
        let inner = err.into_inner();
        MemoryError::Parse {
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|err| MemoryError::Parse {
        line: err.line(),
        column: err.column(),
        field: ".".into(),
        message: err.to_string(),
    })?;
    if doc.version != MEMORY_FORMAT_VERSION {
        return Err(MemoryError::UnsupportedVersion(doc.version));
    }
    let capacity = doc.snapshot_capacity;
    if let Some(&bad) = doc.snapshots.keys().find(|&&k| k == 0 || k > capacity) {
        return Err(MemoryError::SnapshotOutOfRange { index: bad, capacity });
    }
    Ok((
        doc.entries,
        SnapshotStore {
            capacity,
            snapshots: doc.snapshots,
        },
    ))
}

/// Writes the canonical document via a temporary file and rename.
pub fn save(path: &Path, memory: &SkillMemory, store: &SnapshotStore) -> Result<(), MemoryError> {
    write_atomically(path, to_canonical_string(memory, store).as_bytes())
}

pub fn load(path: &Path) -> Result<(SkillMemory, SnapshotStore), MemoryError> {
    let text = fs::read_to_string(path).map_err(|source| MemoryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_canonical_str(&text)
}

pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), MemoryError> {
    let io_err = |source| MemoryError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "memory".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut file = fs::File::create(&tmp).map_err(io_err)?;
        file.write_all(bytes).map_err(io_err)?;
        file.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}
