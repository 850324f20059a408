use std::fmt;

use spectral_adapter::Error;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Bad input data or configuration.
    Data(String),
    /// The numerics failed a check.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Numerical(_) => 4,
            CliError::Core(_) | CliError::Data(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Data(s) => write!(f, "invalid input: {s}"),
            CliError::Numerical(s) => write!(f, "numerical failure: {s}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
