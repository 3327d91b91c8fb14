fn main() {
    std::process::exit(niwt::cli::run());
}
