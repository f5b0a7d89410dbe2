fn main() {
    std::process::exit(repkit::cli::run());
}
