fn main() {
    std::process::exit(kvtune::cli::run(std::env::args_os()));
}
