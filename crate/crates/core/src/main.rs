use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::init();
    let stdin = io::stdin();
    medref::cli::run_with(std::env::args_os(), &mut stdin.lock(), &mut io::stdout())
}
