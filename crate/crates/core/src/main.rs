fn main() {
    std::process::exit(actoffload::cli::run(std::env::args_os()));
}
