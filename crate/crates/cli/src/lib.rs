//! Pipeline orchestration behind the `crcvoi` binary: each subcommand reads
//! the run configuration, calls into the `crcvoi` library, and writes its
//! artifacts with a provenance header.

pub mod commands;
pub mod config;

pub use commands::{run, Command, Context};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Runtime {
        context: String,
        #[source]
        source: crcvoi::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime { .. } => 3,
        }
    }
}

pub(crate) trait RuntimeContext<T> {
    fn context(self, what: impl Into<String>) -> Result<T, CliError>;
}

impl<T, E: Into<crcvoi::Error>> RuntimeContext<T> for Result<T, E> {
    fn context(self, what: impl Into<String>) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime {
            context: what.into(),
            source: e.into(),
        })
    }
}
