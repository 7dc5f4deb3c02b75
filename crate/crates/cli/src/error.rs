use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input files, configuration or arguments (exit code 1).
    #[error("{0}")]
    Input(String),

    /// The numerics did not converge (exit code 2).
    #[error("{0}")]
    NonConvergence(String),

    #[error(transparent)]
    Core(#[from] msgam::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::NonConvergence(_) => 2,
            CliError::Core(e) => match e {
                msgam::Error::SingularInformation
                | msgam::Error::NonFiniteHessian { .. }
                | msgam::Error::NonFiniteDensity { .. }
                | msgam::Error::TooManyFailures { .. } => 2,
                _ => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
