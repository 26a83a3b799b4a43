fn main() {
    std::process::exit(otafeel::harness::cli::run(std::env::args_os()));
}
