fn main() {
    std::process::exit(scalesim::cli::main_with_args(std::env::args_os()));
}
