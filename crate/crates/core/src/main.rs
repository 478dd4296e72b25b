fn main() {
    std::process::exit(labelshift::cli::main_with_args(std::env::args_os()));
}
