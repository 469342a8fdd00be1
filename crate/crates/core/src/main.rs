fn main() {
    std::process::exit(transrad::cli::run());
}
