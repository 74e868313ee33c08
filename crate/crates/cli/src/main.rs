fn main() {
    std::process::exit(embdiff_cli::run(std::env::args_os()));
}
