use std::io::Write;
use std::process::ExitCode;

use bivlgm_cli::args::Cli;
use bivlgm_cli::commands::CliError;
use clap::Parser;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match bivlgm_cli::run(&cli) {
        Ok(text) => {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Runtime {
                manifest: Some(path),
                ..
            } = &e
            {
                eprintln!("manifest: {}", path.display());
            }
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run with --help for usage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
