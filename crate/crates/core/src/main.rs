fn main() {
    std::process::exit(cptlab::cli::main_from_args(std::env::args()));
}
