fn main() {
    std::process::exit(ignorability::cli::run(std::env::args_os()));
}
