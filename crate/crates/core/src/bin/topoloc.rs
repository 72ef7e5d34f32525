fn main() {
    std::process::exit(topoloc::cli::run(std::env::args_os()));
}
