fn main() {
    std::process::exit(fsca::cli::run(std::env::args().collect()));
}
