fn main() {
    std::process::exit(fewshot::cli::run(std::env::args_os()));
}
