fn main() {
    std::process::exit(xct_core::cli::run(std::env::args_os()));
}
