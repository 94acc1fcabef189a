fn main() {
    std::process::exit(fedet::cli::run_cli(std::env::args_os()));
}
