use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: axis {axis} is invalid for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("reshape from {from:?} to {to:?} changes the element count")]
    ReshapeMismatch { from: Vec<usize>, to: Vec<usize> },

    #[error("{op}: label {label} is not 0 or 1")]
    LabelOutOfRange { op: &'static str, label: f64 },

    #[error("{op}: index {index} out of range 0..{bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("no gradient record: the value was produced with the tape disabled or does not require grad")]
    TapeDisabled,

    #[error("vjp: output does not depend on the requested input")]
    NoDependency,

    #[error("variable belongs to a different tape")]
    ForeignVariable,

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range {lo}..={hi}")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("timestep ordering violated: {0}")]
    TimestepOrder(String),

    #[error("sigma^2 = {sigma_sq} exceeds 1 - alpha_bar = {bound}")]
    SigmaTooLarge { sigma_sq: f64, bound: f64 },

    #[error("noise tensor must be given iff sigma > 0")]
    NoiseMismatch,

    #[error("sampler plan needs 2 <= M <= T + 1, got M = {m}, T = {t}")]
    PlanOutOfRange { m: usize, t: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameters changed between record and replay (checksum {recorded:08x} != {current:08x})")]
    ParamChecksum { recorded: u32, current: u32 },

    #[error("non-finite value in {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },

    #[error("live memory exceeded the budget of {budget} bytes")]
    BudgetExceeded { budget: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dtype mismatch for '{name}': file has {found:?}, expected {expected:?}")]
    DTypeMismatch {
        name: String,
        expected: DType,
        found: DType,
    },

    #[error("{path}: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("{path}: parse error: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("missing tensor '{0}' in checkpoint")]
    MissingTensor(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io { .. }
            | Error::Crc { .. }
            | Error::Parse { .. }
            | Error::MissingTensor(_)
            | Error::DTypeMismatch { .. } => 2,
            Error::NonFinite { .. } => 3,
            Error::Config(_)
            | Error::IndexOutOfRange { .. }
            | Error::InvalidSchedule(_)
            | Error::PlanOutOfRange { .. }
            | Error::Empty(_) => 1,
            _ => 3,
        }
    }
}
