//! Momentum-contrast pretraining for segmentation backbones, with a local
//! patch contrastive term, iterative ZCA whitening and spectral diagnostics
//! for dimensional collapse.

// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod diagnostics;
pub mod downstream;
pub mod engine;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod losses;
pub mod nets;
pub mod phantom;
pub mod whitening;

pub use error::{CheckpointError, DatasetError, Error, Result};
pub use grid::{Grid, Real};

/// Whether normalization layers use batch statistics (and update their
/// running state) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
