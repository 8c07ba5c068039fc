use std::fmt;

use ngfn_core::Error as CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Config,
    Io,
    Checkpoint,
    Numerical,
    Precondition,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Config => "config",
            Kind::Io => "io",
            Kind::Checkpoint => "checkpoint",
            Kind::Numerical => "numerical",
            Kind::Precondition => "precondition",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Config => 3,
            Kind::Io => 4,
            Kind::Checkpoint => 5,
            Kind::Numerical => 6,
            Kind::Precondition => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    /// Single-line form written to stderr: `ngfn-error kind=<k> code=<c> message=<m>`.
    pub fn line(&self) -> String {
        let msg: Vec<&str> = self.message.split_whitespace().collect();
        format!("ngfn-error kind={} code={} message={}", self.kind.name(), self.kind.exit_code(), msg.join(" "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::Config(_) => Kind::Config,
            CoreError::Shape(_) => Kind::Checkpoint,
            CoreError::Numerical { .. } => Kind::Numerical,
            CoreError::Precondition(_) | CoreError::Empty(_) => Kind::Precondition,
        };
        Self::new(kind, e.to_string())
    }
}

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::new(Kind::Io, format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;
