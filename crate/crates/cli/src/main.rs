// SPDX-License-Identifier: Apache-2.0

use std::process::ExitCode;

use clap::Parser;
use power_attest_cli::args::Command;
use power_attest_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = match &cli.command {
        Command::Pipeline(_) => Some("pipeline"),
        _ => None,
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let report = e.report(stage);
            eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
            ExitCode::from(report.exit_code as u8)
        }
    }
}
