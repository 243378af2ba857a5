fn main() {
    std::process::exit(idea::cli::run(std::env::args_os()));
}
