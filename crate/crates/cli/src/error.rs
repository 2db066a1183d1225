use serde_json::json;

/// Exit status classes: 1 usage, 2 bad input data, 3 failed computation.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }

    /// One-line JSON record written to stderr.
    pub fn record(&self) -> String {
        json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.message() }).to_string()
    }
}

impl From<prominence::Error> for CliError {
    fn from(e: prominence::Error) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<prominence_service::ServiceError> for CliError {
    fn from(e: prominence_service::ServiceError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Maps I/O failures on a named input to data errors.
pub fn read_error(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Maps failures writing an artifact to runtime errors.
pub fn write_error(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
