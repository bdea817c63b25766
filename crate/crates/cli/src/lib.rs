//! Batch front end: ingest LOBSTER files, synthesize streams, train,
//! evaluate, predict and trace. Exit codes are 0 on success, 1 on runtime
//! or data errors and 2 on usage or validation errors.

pub mod commands;
pub mod config;
pub mod fixture;

use config::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or parameter values.
    Usage(String),
    /// I/O, parse or training failures.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest(a) => commands::cmd_ingest(a),
        Command::Synth(a) => commands::cmd_synth(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Predict(a) => commands::cmd_predict(a),
        Command::Trace(a) => commands::cmd_trace(a),
    }
}
