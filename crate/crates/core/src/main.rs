fn main() {
    std::process::exit(attnguide::cli::main_with_args(std::env::args_os()));
}
