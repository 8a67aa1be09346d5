fn main() {
    std::process::exit(testtime_core::cli::main_with_args(std::env::args_os()));
}
