use std::fmt;
use std::path::Path;
use std::process::ExitCode;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, bad config, or unreadable inputs. Exit code 2.
    Usage(String),
    /// A pipeline stage failed on valid inputs. Exit code 1.
    Pipeline(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn pipeline(msg: impl Into<String>) -> Self {
        Failure::Pipeline(msg.into())
    }

    /// Wraps an error from reading or parsing `path`.
    pub fn input(path: &Path, e: impl fmt::Display) -> Self {
        Failure::Usage(format!("{}: {e}", path.display()))
    }

    pub fn output(path: &Path, e: impl fmt::Display) -> Self {
        Failure::Pipeline(format!("writing {}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Usage(_) => ExitCode::from(2),
            Failure::Pipeline(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Pipeline(m) => f.write_str(m),
        }
    }
}
