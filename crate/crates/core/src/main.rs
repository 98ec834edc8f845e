fn main() {
    std::process::exit(dsmoe::cli::run(std::env::args_os()));
}
