fn main() {
    std::process::exit(radiomap::cli::run(std::env::args_os()));
}
