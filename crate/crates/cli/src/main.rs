fn main() {
    std::process::exit(donut_cli::run(std::env::args_os()));
}
