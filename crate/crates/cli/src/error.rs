use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use organpp::ErrorClass;

/// A failure with its exit-code class.
#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        organpp::Error::io(path, e).into()
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        CliError { class: ErrorClass::Validation, message: message.into() }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self.class {
            ErrorClass::Io => 2,
            ErrorClass::Validation => 3,
            ErrorClass::Computation => 4,
        })
    }
}

impl From<organpp::Error> for CliError {
    fn from(e: organpp::Error) -> Self {
        CliError { class: e.class(), message: e.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
