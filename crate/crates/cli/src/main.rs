use std::process::ExitCode;

use clap::Parser;

use sep_cli::{format_fields, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli, true) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                format_fields(&[
                    ("status", "error".into()),
                    ("exit_code", e.exit_code().to_string()),
                    ("error", e.to_string()),
                ])
            );
            ExitCode::from(e.exit_code())
        }
    }
}
