fn main() {
    std::process::exit(siw_cli::run(std::env::args_os()));
}
