fn main() {
    std::process::exit(symreg_cli::app::main_with(std::env::args_os()));
}
