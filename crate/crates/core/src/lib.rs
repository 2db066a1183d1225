//! Word-level speech prominence estimation trained on crowdsourced binary
//! emphasis annotations.
//!
//! The pipeline: [`corpus`] loads utterances and word alignments, [`features`]
//! computes log-Mel spectrograms on the alignment frame grid, [`annotations`]
//! turns emphasis labels into prominence targets, [`model`] and [`training`]
//! fit the convolutional estimator, [`evaluation`] scores it, [`wavelet`]
//! provides a training-free baseline and [`experiments`] runs the studies.

pub mod annotations;
pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod features;
pub mod loss;
pub mod model;
pub mod rasch;
pub mod synthetic;
pub mod textgrid;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
