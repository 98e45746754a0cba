fn main() {
    std::process::exit(graphprior_cli::main_with_args(std::env::args_os()));
}
