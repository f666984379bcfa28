fn main() {
    std::process::exit(tilesparse_cli::cli::run(std::env::args_os()));
}
