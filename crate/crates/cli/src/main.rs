fn main() {
    std::process::exit(stepsnet_cli::run(std::env::args()));
}
