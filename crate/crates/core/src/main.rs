fn main() {
    std::process::exit(oscmac::cli::main_with_args(std::env::args_os()));
}
