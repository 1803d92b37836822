fn main() {
    std::process::exit(reactdiff_cli::main_with_args(std::env::args().collect()));
}
