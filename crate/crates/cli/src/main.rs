mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{expand_config, Cli, Command};

fn run() -> dbvae::Result<()> {
    let argv = expand_config(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(dbvae::Error::Usage(e.render().to_string().trim_end().to_string())),
    };
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Interpolate(a) => commands::interpolate(a),
        Command::Topk(a) => commands::topk(a),
        Command::ExportLatents(a) => commands::export_latents(a),
        Command::ExportUsage(a) => commands::export_usage(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dbvae: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
