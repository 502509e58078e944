fn main() {
    std::process::exit(mmel::cli::run(std::env::args_os()));
}
