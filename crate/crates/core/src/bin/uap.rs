fn main() {
    std::process::exit(uap_core::cli::run(std::env::args_os()));
}
