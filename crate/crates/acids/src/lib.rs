//! Adaptive clustering of multi-domain data under domain shift.
//!
//! Fully unsupervised pipeline: a mutual-information clustering objective
//! is trained jointly over several unlabeled source domains while
//! domain-conditional batch normalization and an information-theoretic
//! alignment loss keep clusters from encoding domain style. The trained
//! model then adapts to an unlabeled target domain without any source
//! data, by estimating target normalization statistics and maximizing a
//! confidence-thresholded consistency MI.
//!
//! Runnable walkthroughs for every major capability live in `examples/`;
//! the `acids` binary exposes the same flows as subcommands
//! (`generate`, `train`, `adapt`, `eval`, `ablate`).

pub mod adapter;
pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod optim;
pub mod prob;
pub mod tape;
pub mod trainer;

pub use error::{Error, Principal, Result};
