mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use sentio_core::training::Stage;

use args::{Cli, Command};
use config::CliResult;

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Validate(c) => commands::validate(c),
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain1(a) => commands::train(Stage::Pretrain1, a),
        Command::Pretrain2(a) => commands::train(Stage::Pretrain2, a),
        Command::Finetune(a) => commands::train(Stage::Finetune, a),
        Command::Eval(c) => commands::eval(c),
        Command::ExportEmbeddings(c) => commands::export_embeddings(c),
        Command::BiasReport(a) => commands::bias(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SENTIO_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit": e.exit_code() });
            eprintln!("{record}");
            ExitCode::from(e.exit_code())
        }
    }
}
