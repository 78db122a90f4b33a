use std::process::ExitCode;

use clap::Parser;
use faststi::cli::{self, Cli};
use faststi::AppError;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(AppError::Usage(format!("cannot start {n} threads: {e}")));
        }
    }
    match cli::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: AppError) -> ExitCode {
    let record = serde_json::to_string(&e.record()).unwrap_or_else(|_| format!("{{\"message\":\"{e}\"}}"));
    eprintln!("{record}");
    ExitCode::from(e.exit_code() as u8)
}
