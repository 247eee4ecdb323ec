//! Lifelong skill learning for tabletop manipulation.
//!
//! A skill is a natural-language plan plus one executable program per step.
//! The [`trainer`] plans skills with models, runs them in an
//! [`rollout::Environment`], reflects on failure videos, replans with skills
//! retrieved from [`memory`], and commits verified skills. The [`evaluator`]
//! replays memory snapshots without any model calls.

pub mod cli;
pub mod config;
pub mod evaluator;
pub mod memory;
pub mod model;
pub mod planning;
pub mod reflection;
pub mod retrieval;
pub mod rollout;
pub mod seeds;
pub mod skill;
pub mod suite;
pub mod trainer;
