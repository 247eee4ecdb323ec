//! Mixed-similarity retrieval of stored skills.
//!
//! Two channels each nominate `k/2` memory entries:
//!
//! * task similarity: cosine between the query description and the stored
//!   task description, keeping only scores strictly above the threshold;
//! * plan similarity: for every query plan line take the best cosine against
//!   the stored plan's lines, then average over the query lines.
//!
//! The result is the union of both nominations, one record per task (the
//! higher score wins, the task channel on a tie), ordered by score descending
//! then task id ascending. Scores that agree to [`TIE_DECIMALS`] decimal places
//! count as tied, so rounding noise never outranks the task-id tie-break.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::SkillMemory;
use crate::skill::{Skill, SubtaskInstruction};

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum EmbedError {
    /// Transient provider failure; callers may retry.
    #[error("embedding provider failed: {message}")]
    Provider { message: String, retriable: bool },
    #[error("embedding has {found} dimensions, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding contains a non-finite component")]
    NonFinite,
}

impl EmbedError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbedError::Provider { retriable: true, .. })
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// An L2-normalized embedding. The zero vector stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Cosine similarity in `[-1, 1]`; 0 when either side is the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// Deterministic bag-of-tokens embedding: tokens hashed into `dim` buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagProvider {
    dim: usize,
}

impl Default for HashedBagProvider {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

impl HashedBagProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    /// Lowercased runs of alphanumeric characters.
    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut hasher = fnv::FnvHasher::default();
        hasher.write(token.as_bytes());
        (hasher.finish() % self.dim as u64) as usize
    }
}

impl EmbeddingProvider for HashedBagProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut counts = vec![0.0; self.dim];
        for token in Self::tokens(text) {
            counts[self.bucket(&token)] += 1.0;
        }
        EmbeddingVector::normalized(counts)
    }
}

/// Embeddings from an HTTP `/embeddings` endpoint (`MODEL_BASE_URL`, `MODEL_NAME_EMBED`).
pub struct RemoteEmbeddingProvider {
    base_url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    agent: ureq::Agent,
}

impl RemoteEmbeddingProvider {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, dim: usize) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            dim,
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(60))
                .build(),
        }
    }

    pub fn from_env(dim: usize) -> Result<Self, EmbedError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let missing = |k: &str| EmbedError::Provider {
            message: format!("environment variable {k} is not set"),
            retriable: false,
        };
        let base = var("MODEL_BASE_URL").ok_or_else(|| missing("MODEL_BASE_URL"))?;
        let model = var("MODEL_NAME_EMBED").ok_or_else(|| missing("MODEL_NAME_EMBED"))?;
        Ok(Self::new(&base, &model, var("MODEL_API_KEY"), dim))
    }
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if HashedBagProvider::tokens(text).next().is_none() {
            return Ok(EmbeddingVector::zeros(self.dim));
        }
        let mut call = self.agent.post(&format!("{}/embeddings", self.base_url));
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let reply: serde_json::Value = call
            .send_json(serde_json::json!({"model": self.model, "input": text}))
            .map_err(|e| EmbedError::Provider {
                retriable: !matches!(&e, ureq::Error::Status(code, _) if *code < 500 && *code != 429),
                message: e.to_string(),
            })?
            .into_json()
            .map_err(|e| EmbedError::Provider {
                message: e.to_string(),
                retriable: false,
            })?;
        let values: Vec<f64> = reply["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| EmbedError::Provider {
                message: "response has no data[0].embedding".into(),
                retriable: false,
            })?
            .iter()
            .map(|v| v.as_f64().unwrap_or(f64::NAN))
            .collect();
        if values.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                found: values.len(),
            });
        }
        EmbeddingVector::normalized(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    TaskSim,
    CodeSim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    pub task_id: String,
    pub task_description: String,
    pub skill: Skill,
    pub score: f64,
    pub channel: Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub threshold: f64,
    pub exclude_self: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 4,
            threshold: 0.5,
            exclude_self: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k < 2 || !self.k.is_multiple_of(2) {
            return Err(RetrievalError::Config(format!("k must be even and >= 2, got {}", self.k)));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(RetrievalError::Config(format!(
                "threshold must lie in [-1, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn per_channel(&self) -> usize {
        self.k.div_ceil(2)
    }
}

/// What the caller is planning for.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalQuery<'a> {
    pub task_id: &'a str,
    pub description: &'a str,
    /// Empty before any plan exists; only the task channel contributes then.
    pub plan: &'a [SubtaskInstruction],
}

struct EmbeddingCache<'p> {
    provider: &'p dyn EmbeddingProvider,
    cache: HashMap<String, EmbeddingVector>,
}

impl<'p> EmbeddingCache<'p> {
    fn get(&mut self, text: &str) -> Result<&EmbeddingVector, EmbedError> {
        if !self.cache.contains_key(text) {
            let v = self.provider.embed(text)?;
            self.cache.insert(text.to_string(), v);
        }
        Ok(&self.cache[text])
    }
}

pub const TIE_DECIMALS: i32 = 12;

/// Score rounded to [`TIE_DECIMALS`] places, used for every comparison.
pub fn rank_key(score: f64) -> i64 {
    (score * 10f64.powi(TIE_DECIMALS)).round() as i64
}

fn top_n(mut scored: Vec<(f64, &str)>, n: usize) -> Vec<(f64, &str)> {
    scored.sort_by(|a, b| rank_key(b.0).cmp(&rank_key(a.0)).then_with(|| a.1.cmp(b.1)));
    scored.truncate(n);
    scored
}

pub fn retrieve(
    query: &RetrievalQuery<'_>,
    memory: &SkillMemory,
    cfg: &RetrievalConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<ScoredExample>, RetrievalError> {
    cfg.validate()?;
    let candidates: Vec<(&str, &Skill)> = memory
        .skills()
        .filter(|(id, _)| !(cfg.exclude_self && *id == query.task_id))
        .collect();
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let mut cache = EmbeddingCache {
        provider,
        cache: HashMap::new(),
    };
    let per_channel = cfg.per_channel();

    let query_desc = cache.get(query.description)?.clone();
    let mut task_scores = Vec::with_capacity(candidates.len());
    for (id, skill) in &candidates {
        task_scores.push((cosine(&query_desc, cache.get(skill.description())?)?, *id));
    }
    let by_task: Vec<(f64, &str)> = top_n(task_scores, per_channel)
        .into_iter()
        .filter(|(score, _)| *score > cfg.threshold)
        .collect();

    let mut by_code = Vec::new();
    if !query.plan.is_empty() {
        let query_lines = query
            .plan
            .iter()
            .map(|d| cache.get(d.as_str()).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        let mut code_scores = Vec::with_capacity(candidates.len());
        for (id, skill) in &candidates {
            let mut total = 0.0;
            for q in &query_lines {
                let mut best = f64::NEG_INFINITY;
                for line in skill.plan() {
                    best = best.max(cosine(q, cache.get(line.as_str())?)?);
                }
                total += best;
            }
            code_scores.push((total / query_lines.len() as f64, *id));
        }
        by_code = top_n(code_scores, per_channel);
    }

    let mut merged: BTreeMap<&str, (f64, Channel)> = BTreeMap::new();
    for (score, id) in by_task {
        merged.insert(id, (score, Channel::TaskSim));
    }
    for (score, id) in by_code {
        match merged.get(id) {
            Some((existing, _)) if rank_key(*existing) >= rank_key(score) => {}
            _ => {
                merged.insert(id, (score, Channel::CodeSim));
            }
        }
    }

    let skills: BTreeMap<&str, &Skill> = candidates.into_iter().collect();
    let mut out: Vec<ScoredExample> = merged
        .into_iter()
        .map(|(id, (score, channel))| {
            let skill = skills[id];
            ScoredExample {
                task_id: id.to_string(),
                task_description: skill.description().to_string(),
                skill: skill.clone(),
                score,
                channel,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        rank_key(b.score)
            .cmp(&rank_key(a.score))
            .then_with(|| a.task_id.cmp(&b.task_id))
    });
    Ok(out)
}
