fn main() {
    if let Err(e) = repalign::cli::run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
