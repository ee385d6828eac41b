fn main() {
    std::process::exit(deepcox::cli::run(std::env::args_os()));
}
