fn main() {
    std::process::exit(ecgscreen::cli::run(std::env::args_os()));
}
