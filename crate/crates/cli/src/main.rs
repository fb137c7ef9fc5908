use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(fde_dep::run_cli(std::env::args_os()).clamp(0, 255) as u8)
}
