fn main() {
    std::process::exit(cdt_core::cli::run(std::env::args_os()));
}
