fn main() {
    std::process::exit(primi::cli::run(std::env::args_os()));
}
