fn main() {
    std::process::exit(keygraph::cli::run());
}
