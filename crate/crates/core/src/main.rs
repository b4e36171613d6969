fn main() {
    aaq::cli::init_threads();
    std::process::exit(aaq::cli::run_cli(std::env::args_os()));
}
