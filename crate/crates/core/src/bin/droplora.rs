fn main() {
    std::process::exit(droplora::cli::run());
}
