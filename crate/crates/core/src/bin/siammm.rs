use std::process::ExitCode;

fn main() -> ExitCode {
    let code = siammm::cli::run_from(std::env::args_os());
    ExitCode::from(code as u8)
}
