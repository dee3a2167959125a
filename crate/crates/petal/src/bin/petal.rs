use std::process::ExitCode;

fn main() -> ExitCode {
    petal::cli::run()
}
