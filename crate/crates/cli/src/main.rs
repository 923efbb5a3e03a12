fn main() {
    std::process::exit(hat_cli::run(std::env::args_os()));
}
