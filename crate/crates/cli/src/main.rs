fn main() -> std::process::ExitCode {
    scl_cli::main_with_args(std::env::args_os())
}
