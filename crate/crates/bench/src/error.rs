use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] fmoe::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{} check(s) failed: {}", .0.len(), .0.join(", "))]
    CheckFailed(Vec<String>),

    #[error("worker process failed: {0}")]
    Worker(String, i32),
}

pub type Result<T> = std::result::Result<T, BenchError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

impl BenchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::CheckFailed(_) => EXIT_CHECK_FAILED,
            BenchError::Usage(_) => EXIT_USAGE,
            BenchError::Core(e) if e.is_comm() => EXIT_TRANSPORT,
            BenchError::Core(fmoe::Error::InvalidArgument(_)) => EXIT_USAGE,
            BenchError::Core(_) => EXIT_CHECK_FAILED,
            BenchError::Io(_) => EXIT_USAGE,
            BenchError::Worker(_, code) => *code,
        }
    }
}
