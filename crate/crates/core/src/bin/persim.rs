use std::process::ExitCode;

fn main() -> ExitCode {
    persim::cli::main_with_args(std::env::args_os())
}
