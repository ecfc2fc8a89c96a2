use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("NIGHTATLAS_LOG", "info")).init();
    nightatlas::cli::main_with_args(std::env::args_os())
}
