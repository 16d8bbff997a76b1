use std::process::ExitCode;

fn main() -> ExitCode {
    // Usage errors exit with clap's own code (2) inside `run`.
    match svo_cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
