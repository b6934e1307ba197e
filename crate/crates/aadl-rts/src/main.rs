use std::env;
use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(aadl_rts::cli::run(env::args()) as u8)
}
