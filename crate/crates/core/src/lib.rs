//! Prototype mining and learning for open-set recognition.
//!
//! The pipeline trains a few softmax classifiers, scores every training
//! sample by how stable its Mahalanobis neighbourhood is across runs, keeps
//! the stable ones, filters them for diversity into per-class prototype sets,
//! fine-tunes the embedding with a prototype margin loss, and finally rejects
//! unknown inputs by thresholding distance to the nearest prototype set (or
//! the maximum softmax probability).

pub mod backbone;
pub mod cli;
pub mod datastore;
pub mod error;
pub mod metric;
pub mod mining;
pub mod openset;
pub mod pipeline;
pub mod protolearn;
pub mod synthlab;
pub mod uncertainty;

pub use error::{PmalError, Result};
