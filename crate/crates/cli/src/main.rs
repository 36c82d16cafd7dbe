fn main() {
    std::process::exit(blockpool_cli::run(std::env::args_os()));
}
