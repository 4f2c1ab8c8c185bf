fn main() {
    std::process::exit(seal_cli::run(std::env::args_os()));
}
