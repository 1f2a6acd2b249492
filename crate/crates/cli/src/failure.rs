use std::fmt;
use std::process::ExitCode;

/// Why a command stopped. The variant fixes the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad config, flags or inputs: exit 2.
    Config(String),
    /// Training diverged or the numerics failed: exit 3.
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Config(_) => ExitCode::from(2),
            Failure::Numeric(_) => ExitCode::from(3),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<attrib_ens::Error> for Failure {
    fn from(e: attrib_ens::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(format!("I/O: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Config(format!("JSON: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Config(format!("CSV: {e}"))
    }
}
