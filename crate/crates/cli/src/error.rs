use std::fmt;

/// Failure of one CLI invocation, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config keys.
    Usage(String),
    /// `--check` found outputs that differ from the recorded digests.
    Check(String),
    Lib(mdvit::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) => 4,
            CliError::Lib(e) => match e {
                mdvit::Error::Io(_) => 3,
                mdvit::Error::Format(_) | mdvit::Error::Invalid(_) | mdvit::Error::Shape(_) => 4,
                mdvit::Error::Numeric(_) => 5,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Check(_) => "check",
            CliError::Lib(e) => match e {
                mdvit::Error::Io(_) => "io",
                mdvit::Error::Format(_) => "format",
                mdvit::Error::Invalid(_) => "invalid",
                mdvit::Error::Shape(_) => "shape",
                mdvit::Error::Numeric(_) => "numeric",
            },
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Check(m) => m.clone(),
            CliError::Lib(e) => e.to_string(),
        }
    }

    /// The single JSON line printed on stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "code": self.exit_code(), "message": self.message() }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<mdvit::Error> for CliError {
    fn from(e: mdvit::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
