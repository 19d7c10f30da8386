fn main() {
    std::process::exit(ei_cli::main_with(std::env::args_os()));
}
