use std::fmt;

use envtts::Error;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_ARTIFACT: u8 = 3;

/// A failed command: the process exit code and the message for stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn artifact(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_ARTIFACT,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::ArtifactVersion { .. } | Error::Incompatible(_) => EXIT_ARTIFACT,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}
