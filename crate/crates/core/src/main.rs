fn main() {
    std::process::exit(deisi::cli::run(std::env::args_os()));
}
