//! Batch experiment runner: configs, experiments, artifacts and the `dpot`
//! command line.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod artifacts;
pub mod checks;
pub mod color;
pub mod config;
pub mod experiments;

use dpot::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("input: {0}")]
    Input(String),
}

impl CliError {
    /// Process exit status: 2 usage, 3 numeric abort, 4 I/O or input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) | CliError::Input(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::Io(e) => CliError::Io(e.to_string()),
            TrainError::Csv(e) => CliError::Io(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

macro_rules! numeric_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Numeric(e.to_string())
            }
        }
    )*};
}
numeric_from!(
    dpot::tensor::TensorError,
    dpot::nn::NnError,
    dpot::loss::LossError,
    dpot::ot::OtError,
    dpot::batch::BatchError,
    dpot::csir::CsirError
);

impl From<dpot::bench::BenchError> for CliError {
    fn from(e: dpot::bench::BenchError) -> Self {
        match e {
            dpot::bench::BenchError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}
