fn main() {
    std::process::exit(sigmastyle::cli::run(std::env::args_os()));
}
