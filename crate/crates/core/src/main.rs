fn main() {
    let code = adverdecom::cli::run_command(std::env::args_os());
    std::process::exit(code);
}
