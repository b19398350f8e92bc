fn main() {
    std::process::exit(mjollnir::cli::run());
}
