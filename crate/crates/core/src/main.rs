fn main() {
    std::process::exit(koopman_deepc::cli::run(std::env::args_os()));
}
