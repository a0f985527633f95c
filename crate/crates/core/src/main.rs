fn main() {
    std::process::exit(varscan::cli::run(std::env::args_os()));
}
