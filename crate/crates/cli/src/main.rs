fn main() {
    std::process::exit(miscope_cli::run(std::env::args_os()));
}
