fn main() {
    std::process::exit(wcshift::cli::main_with(std::env::args_os()));
}
