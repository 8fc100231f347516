//! Library side of the `srflab` binary: configuration, artifact writing and
//! the subcommands.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod io;

use serde_json::json;

use config::ConfigError;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    BlowUp(String),
    Io(std::io::Error),
    Other(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<srflab::Error> for CliError {
    fn from(e: srflab::Error) -> Self {
        use srflab::Error as E;
        match e {
            E::InvalidParameter { .. } | E::Unresolvable { .. } => CliError::Config(e.into()),
            E::BlowUp { .. } => CliError::BlowUp(e.to_string()),
            E::Io(io) => CliError::Io(io),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::BlowUp(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn report(&self) -> String {
        match self {
            CliError::Config(c) => c.to_json().to_string(),
            CliError::BlowUp(m) => json!({ "error": "blow-up", "message": m }).to_string(),
            CliError::Io(e) => json!({ "error": "io", "message": e.to_string() }).to_string(),
            CliError::Other(m) => json!({ "error": "runtime", "message": m }).to_string(),
        }
    }
}
