fn main() {
    std::process::exit(venom::cli::main_with_args(std::env::args_os()));
}
