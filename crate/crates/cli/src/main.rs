fn main() {
    std::process::exit(trimodal_cli::run(std::env::args_os()));
}
