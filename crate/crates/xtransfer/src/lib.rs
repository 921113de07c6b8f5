//! Cross-modality transfer by layer-wise model repairing and
//! resource-constrained layer recombining.
//!
//! A zoo of pretrained source networks is cut into atomic layer units. Each
//! unit is adapted to a few-shot target task by training a small connector
//! against class anchors in a shared projection space (repair), pruned to the
//! cheapest channel subset that keeps its discriminative score (removal), and
//! the repaired units are then recombined under a resource budget by a
//! layer-wise search that models how repair gains grow with depth.
//!
//! Entry points: [`zoo`] builds and segments models, [`srr`] repairs a single
//! unit, [`lws`] runs the search, [`eval`] provides the synthetic benchmark
//! and baselines, and [`cli`] wires everything into the `xtransfer` binary.

pub mod anchor;
pub mod cli;
pub mod error;
pub mod eval;
pub mod latent;
pub mod lws;
pub mod ops;
pub mod seeds;
pub mod srr;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
