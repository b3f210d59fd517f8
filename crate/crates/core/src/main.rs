fn main() {
    std::process::exit(dyngpi::cli::cli_main(std::env::args_os()));
}
