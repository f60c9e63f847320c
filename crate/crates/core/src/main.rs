fn main() {
    std::process::exit(graphmatch::cli::main());
}
