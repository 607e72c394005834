use std::path::PathBuf;

use mpp_rbsde::error::{FieldError, GeneratorError, ModelError, OracleError, PricingError, SolverError, TreeError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{kind}: {0}", kind = kind(.0))]
    Core(#[from] mpp_rbsde::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("MissingResults: no result files under {}", .0.display())]
    MissingResults(PathBuf),
    #[error("check failure: {0}")]
    CheckFailed(String),
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}
via_core!(FieldError, GeneratorError, ModelError, OracleError, PricingError, SolverError, TreeError);

impl CliError {
    /// 1 configuration or input, 2 numerical failure, 3 theorem-check failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::CheckFailed(_) => 3,
            _ => 1,
        }
    }
}

/// Innermost variant name of a core error, e.g. `CompensatorOutOfRange`.
fn kind(e: &mpp_rbsde::Error) -> String {
    let debug = format!("{e:?}");
    let mut last = "";
    for seg in debug.split('(') {
        let end = seg.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(seg.len());
        if end == 0 {
            break;
        }
        last = &seg[..end];
        if end != seg.len() {
            break;
        }
    }
    last.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_the_innermost_variant() {
        let e: CliError = ModelError::CompensatorOutOfRange { step: 0, value: 1.2 }.into();
        assert!(e.to_string().starts_with("CompensatorOutOfRange: "), "{e}");
        assert_eq!(e.exit_code(), 1);
        let e: CliError = SolverError::FixedPointDiverged { node: 3, iterations: 200 }.into();
        assert!(e.to_string().starts_with("FixedPointDiverged"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }
}
