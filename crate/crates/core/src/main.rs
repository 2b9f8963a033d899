fn main() {
    std::process::exit(infogate::cli::main_with_args(std::env::args_os()));
}
