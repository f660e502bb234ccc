fn main() {
    std::process::exit(nestdrug_cli::run(std::env::args_os().collect()));
}
