use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite integrand value at observation {index}")]
    NonFinite { index: usize },

    #[error("singular censoring weight at observation {index}: 1 - G(Z-) = 0")]
    SingularWeight { index: usize },

    #[error("degenerate window: {0}")]
    DegenerateWindow(String),

    #[error("degenerate objective: all {excluded} terms excluded")]
    DegenerateObjective { excluded: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("selection failed: {0}")]
    Selection(String),

    #[error("optimizer failed: {0}")]
    Convergence(String),

    #[error("censoring calibration failed: {0}")]
    Calibration(String),

    #[error("monte carlo harness: {0}")]
    Harness(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Tags an error with the pipeline stage it came from.
    pub fn at(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage annotations stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the command-line tool: 2 for input errors,
    /// 3 for numerical or fitting failures, 4 for anything internal.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::InvalidInput(_) | Error::Parse { .. } | Error::Config(_) => 2,
            Error::Io(_) => 2,
            Error::Internal(_) | Error::Stage { .. } => 4,
            _ => 3,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
