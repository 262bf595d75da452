fn main() {
    std::process::exit(sfda_core::cli::run(std::env::args_os()));
}
