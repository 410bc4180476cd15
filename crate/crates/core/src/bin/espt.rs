fn main() {
    std::process::exit(espt::cli::run_cli(std::env::args_os()));
}
