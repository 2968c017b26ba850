use std::process::ExitCode;

fn main() -> ExitCode {
    canids::cli::run()
}
