fn main() {
    std::process::exit(copygec::cli::run(std::env::args_os()));
}
