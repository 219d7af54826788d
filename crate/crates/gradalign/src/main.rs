fn main() {
    std::process::exit(gradalign::cli::run());
}
