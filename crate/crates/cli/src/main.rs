use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(rnnbf_cli::run(std::env::args_os()))
}
