mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use args::{Cli, Command};
use commands::Globals;

/// Why a command stopped: bad invocation (exit 1) or a failure while running (exit 2).
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<fcseg::Error> for Failure {
    fn from(e: fcseg::Error) -> Self {
        match e {
            fcseg::Error::Config(_) | fcseg::Error::Domain(_) | fcseg::Error::DepthOutOfRange { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.into()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let globals = Globals { seed: cli.seed, config: cli.config.clone(), out: cli.out.clone() };
    let name = cli.command.name();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(&globals, a),
        Command::Depth(a) => commands::depth(&globals, a),
        Command::Train(a) => commands::run_train(&globals, a),
        Command::Eval(a) => commands::eval(&globals, a),
        Command::Probe(a) => commands::probe(&globals, a),
        Command::Ablate(a) => commands::run_ablate(&globals, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = Cli::command();
            let sub = cmd.find_subcommand_mut(name).map(|s| s.render_usage());
            eprintln!("{}", sub.unwrap_or_else(|| cmd.render_usage()));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
