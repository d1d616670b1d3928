fn main() {
    std::process::exit(eqt_core::cli::run(std::env::args_os()));
}
