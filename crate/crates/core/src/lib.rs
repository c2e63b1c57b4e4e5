//! Affective-cue detection over chat corpora.
//!
//! A taxonomy of yes/no/unsure judge classifiers runs as a two-tier cascade
//! over conversations; per-classifier adjusted scores feed user-level
//! aggregates, longitudinal slopes, usage deciles, survey and scale
//! analyses, and topic distributions. [`simgen`] produces seeded corpora
//! with planted ground truth for end-to-end checks.

pub mod analytics;
pub mod cascade;
pub mod cli;
pub mod corpus;
pub mod judge;
pub mod language;
pub mod manifest;
pub mod simgen;
pub mod taxonomy;
pub mod topics;
