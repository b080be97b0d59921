fn main() {
    std::process::exit(latentflow::cli::run(std::env::args_os()));
}
