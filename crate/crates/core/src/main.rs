fn main() {
    std::process::exit(scalecorr::cli::main_with_args(std::env::args_os()));
}
