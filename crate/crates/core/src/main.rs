fn main() {
    std::process::exit(neuroprobe::cli::run());
}
