use std::process::ExitCode;

fn main() -> ExitCode {
    punctscl_cli::run(std::env::args_os(), &mut std::io::stdout().lock())
}
