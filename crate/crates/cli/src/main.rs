fn main() {
    std::process::exit(swinsyn_cli::run(std::env::args_os()));
}
