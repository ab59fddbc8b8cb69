fn main() {
    std::process::exit(bilevel_adapt_cli::run(std::env::args_os()));
}
