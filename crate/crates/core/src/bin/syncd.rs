fn main() {
    std::process::exit(syncd::cli::run(std::env::args_os()));
}
