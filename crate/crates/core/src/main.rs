fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(drivelab::cli::main_with(std::env::args_os()))
}
