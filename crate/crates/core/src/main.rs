use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use msmpc::cli::{execute, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(out) => {
            // A closed pipe (e.g. `| head`) is not an error of the run.
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}", out.report);
            for f in &out.files {
                let _ = writeln!(stdout, "wrote {}", f.display());
            }
            if out.success {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
