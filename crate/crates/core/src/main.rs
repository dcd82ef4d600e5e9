fn main() {
    std::process::exit(fedrep::cli::main());
}
