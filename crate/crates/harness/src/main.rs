fn main() {
    std::process::exit(betaat_harness::cli::run(std::env::args_os()));
}
