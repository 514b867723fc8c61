//! Library side of the `stripflow` command-line tool.

pub mod alloc;
pub mod bench;
pub mod commands;
pub mod config;

use std::fmt;

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass (exit 1).
    Check(anyhow::Error),
    /// Bad flags, configuration, or inputs (exit 2).
    Usage(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Check(e) | Failure::Usage(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<stripflow::Error>() {
            Some(stripflow::Error::NonFinite { .. }) => Failure::Check(e),
            _ => Failure::Usage(e),
        }
    }
}

impl From<stripflow::Error> for Failure {
    fn from(e: stripflow::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}
