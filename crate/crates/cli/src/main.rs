fn main() {
    std::process::exit(mosaix_cli::app::run(std::env::args_os()));
}
