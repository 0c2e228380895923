use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(concsim::cli::run(std::env::args()) as u8)
}
