use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(hac_passivity::cli::run(std::env::args_os()))
}
