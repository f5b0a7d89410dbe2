//! repkit counts exercise repetitions from 9-channel inertial sensor streams.
//!
//! The pipeline embeds fixed-size signal windows with a masked conv + GRU
//! network trained in three phases (binary classification, semi-hard triplet
//! learning, 5-shot fine-tuning), classifies windows as peak / non-peak by
//! mean cosine similarity against a registered support set, and converts the
//! label sequence into a repetition count by counting runs of peaks.
//!
//! Modules map one-to-one onto the pipeline stages:
//! - [`signal`]: stream representation, sliding windows, padding, labeling
//! - [`synthgen`]: deterministic synthetic exercise streams with annotations
//! - [`corpus`]: multi-stream corpora and the on-disk manifest
//! - [`net`]: the embedding network, exact gradients, weight persistence
//! - [`train`]: the three training phases plus Adam / Rectified Adam
//! - [`fewshot`]: registration, support-set classification, counting
//! - [`eval`]: metrics, error histograms, leave-one-exercise-out harness
//! - [`cli`]: the `repkit` command-line entry point

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod net;
pub mod rng;
pub mod signal;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
