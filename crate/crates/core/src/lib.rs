//! Self-supervised pre-training of check-in sequence representations.
//!
//! The pipeline runs `ingest` → `pretrain` → `finetune` → `eval`:
//!
//! * [`ingest`] parses raw check-in logs, filters and segments them, and
//!   builds chronological train/val/test splits with vocabularies.
//! * [`geocode`] featurizes coordinates (geohash) and timestamps (48 slots).
//! * [`encoders`] holds the trainable machinery: bidirectional GRU encoders
//!   for the spatial and temporal views, the momentum twin, the social graph
//!   attention block and the projection heads.
//! * [`losses`] implements the spatial cluster contrast, the temporal
//!   angular-margin contrast and the cross-view alignment objective.
//! * [`pretrain`] and [`finetune`] are the training loops, [`eval`] the metrics.
//! * [`synth`] generates check-in corpora with planted topics and intentions.

pub mod encoders;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod geocode;
pub mod ingest;
pub mod losses;
pub mod nn;
pub mod pretrain;
pub mod synth;

pub use error::{Error, Result};
