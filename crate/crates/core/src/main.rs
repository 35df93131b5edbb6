fn main() {
    std::process::exit(imls_core::cli::run(std::env::args_os()));
}
