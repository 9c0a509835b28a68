mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Forward(a) => commands::forward(a),
        Command::Naive(a) => commands::naive(a),
        Command::Tkd(a) => commands::tkd(a),
        Command::Medi(a) => commands::medi(a),
        Command::Cgls(a) => commands::cgls(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a, cli.threads),
        Command::Dip(a) => commands::dip(a),
        Command::Uqsm(a) => commands::uqsm(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.threads == 0 {
        eprintln!("input error: --threads must be positive");
        return ExitCode::from(1);
    }
    // Only the stitching pool reads --threads directly; this bounds everything else.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qsm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
