use std::path::PathBuf;

use crate::integrators::SolveRecord;
use crate::model::Model;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("basis kind `none` has no basis matrix; use per-step weights directly")]
    NoBasisMatrix,

    #[error("time {t} is not a grid node; non-parameterized weights exist only at grid times")]
    OffGrid { t: f64 },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("integrator exceeded {max_steps} steps at t = {t}")]
    NonConvergence {
        max_steps: usize,
        t: f64,
        record: Box<SolveRecord>,
    },

    #[error("step size {h:e} fell below h_min at t = {t} (problem too stiff)")]
    StepTooSmall {
        t: f64,
        h: f64,
        record: Box<SolveRecord>,
    },

    #[error("{path}:{line}:{column}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize, last_good: Box<Model> },

    #[error("split leaves the training set empty")]
    EmptyTrainSplit,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
