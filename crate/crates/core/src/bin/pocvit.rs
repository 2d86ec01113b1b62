fn main() {
    std::process::exit(pocvit::cli::run(std::env::args_os()));
}
