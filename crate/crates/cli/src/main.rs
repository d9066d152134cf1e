fn main() {
    std::process::exit(textfuse_cli::main_with_args(std::env::args_os()));
}
