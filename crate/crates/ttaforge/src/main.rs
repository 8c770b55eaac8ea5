fn main() {
    if let Err(e) = ttaforge::cli::main() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
