fn main() {
    std::process::exit(stopcal::cli::run(std::env::args_os()));
}
