//! Preference-pair selection for translation fine-tuning.
//!
//! Given a pool of candidate translations per source sentence, each with
//! quality rewards and a reference-policy log-probability, the selectors in
//! [`selectors`] build chosen/rejected pairs. [`losses`] holds the training
//! objectives and [`toylab`] a small tabular world for end-to-end checks.

pub mod error;
pub mod io;
pub mod losses;
pub mod math;
pub mod scoring;
pub mod selectors;
pub mod toylab;
pub mod types;

pub use error::{Error, Result};
pub use scoring::{PairScoreInput, UtilityMatrix};
pub use selectors::{select, select_all, SelectionOutcome, UtilitySource};
pub use types::{
    Candidate, CandidateSet, Direction, DirectionClass, EtaMap, GateMode, LogprobNorm, Method,
    PreferenceDataset, PreferencePair, Provenance, SelectionConfig, SftTarget,
};
