fn main() {
    std::process::exit(swv::cli::main_with_args(std::env::args_os()));
}
