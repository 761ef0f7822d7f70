fn main() {
    std::process::exit(jobfront_cli::cli::run(std::env::args_os()));
}
