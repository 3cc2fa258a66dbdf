use thiserror::Error;

/// Errors raised by the calibration toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("p(no) must be positive for a log-linear fit; entry {index} is {value}")]
    NonPositiveNoClick { index: usize, value: f64 },

    #[error("under-determined: {needed} efficiencies needed, {available} available")]
    UnderDetermined { needed: usize, available: usize },

    #[error("solver did not converge{}: {detail}", replicate_suffix(.replicates))]
    NotConverged {
        replicates: Vec<usize>,
        detail: String,
    },
}

fn replicate_suffix(replicates: &[usize]) -> String {
    if replicates.is_empty() {
        String::new()
    } else {
        format!(" (replicates {replicates:?})")
    }
}

impl Error {
    /// True for failures of the numerical solver, as opposed to bad inputs.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::NotConverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_unit_interval(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            range: "[0, 1]",
        })
    }
}
