fn main() {
    std::process::exit(cect_forge::cli::main());
}
