fn main() -> std::process::ExitCode {
    ltp::cli::main_with(std::env::args_os())
}
