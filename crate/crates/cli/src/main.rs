fn main() {
    std::process::exit(targetflow_cli::run(std::env::args()));
}
