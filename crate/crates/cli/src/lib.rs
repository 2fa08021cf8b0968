//! Library half of the `dilattn` binary: verification suites, synthetic data,
//! and the subcommand bodies, kept here so integration tests can call them.
//!
//! Exit codes: 0 success, 1 for verification, training, or contract
//! failures, 2 for bad input (I/O, config, file format).

pub mod commands;
pub mod datagen;
pub mod oracle;
pub mod verify;

use std::path::{Path, PathBuf};

use dilattn_bench::BenchError;
use dilattn_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("verification failed in suite(s): {}", failed.join(", "))]
    Verification { table: String, failed: Vec<String> },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => core_code(e),
            CliError::Bench(BenchError::Core(e)) => core_code(e),
            CliError::Bench(BenchError::Timer { .. }) => 1,
            CliError::Bench(_) => 2,
            CliError::Verification { .. } => 1,
            CliError::Config(_) | CliError::Io { .. } => 2,
        }
    }
}

fn core_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Config(_) | Error::Format(_) => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Format("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Contract("x".into())).exit_code(), 1);
        assert_eq!(
            CliError::Core(Error::Training { step: 0, reason: "nan".into() }).exit_code(),
            1
        );
        let timer = BenchError::Timer {
            kernel: "dense",
            elapsed_ns: 1,
            resolution_ns: 1,
        };
        assert_eq!(CliError::Bench(timer).exit_code(), 1);
        assert_eq!(CliError::Bench(BenchError::Config("x".into())).exit_code(), 2);
    }
}
