use serde::Serialize;
use shapcam::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ORACLE: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Failure reported as one JSON object on stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
            exit_code: EXIT_USAGE,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

fn io_inside(e: &Error) -> bool {
    match e {
        Error::Io(_) => true,
        Error::Batch { source, .. } | Error::SamplingAborted { source, .. } => io_inside(source),
        _ => false,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (kind, exit_code) = if e.is_oracle_failure() {
            ("oracle", EXIT_ORACLE)
        } else if io_inside(&e) {
            ("io", EXIT_IO)
        } else {
            ("validation", EXIT_USAGE)
        };
        Self {
            kind,
            message: e.to_string(),
            exit_code,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self {
            kind: "validation",
            message: format!("json: {e}"),
            exit_code: EXIT_USAGE,
        }
    }
}
