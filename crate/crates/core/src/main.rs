fn main() {
    std::process::exit(hysreg::cli::main_with_args(std::env::args_os()));
}
