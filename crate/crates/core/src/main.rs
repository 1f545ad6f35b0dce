fn main() {
    std::process::exit(distilkit::cli::main_with_args(std::env::args()));
}
