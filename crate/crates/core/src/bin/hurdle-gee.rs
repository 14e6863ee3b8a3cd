fn main() {
    std::process::exit(hurdle_gee::cli::main_with_args(std::env::args_os()));
}
