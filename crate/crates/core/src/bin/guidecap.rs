use std::process::ExitCode;

fn main() -> ExitCode {
    guidecap::cli::run_from(std::env::args_os())
}
