fn main() {
    std::process::exit(timekt::cli::main_with_args(std::env::args_os()));
}
