fn main() {
    std::process::exit(mvec::cli::run());
}
