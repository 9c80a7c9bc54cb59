fn main() {
    std::process::exit(drn::cli::run(std::env::args()));
}
