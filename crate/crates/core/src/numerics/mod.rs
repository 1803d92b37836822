//! Tensor algebra, reverse-mode autodiff, AdamW and symmetric linear algebra.

pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use linalg::{sym_eigen, sym_sqrt, trace, SymEigen};
pub use optim::{AdamWConfig, AdamWState, CosineWarmRestarts};
pub use params::{Bound, ParamSet};
pub use rng::{derive_seed, derive_seed_str, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{attention, group_norm, layer_norm, sinusoidal_table, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("eigensolver did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }
}

/// Elementwise logistic function.
pub fn sigmoid(x: f64) -> f64 {
    tape::sigmoid(x)
}
