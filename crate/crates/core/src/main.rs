fn main() {
    std::process::exit(fasdg::cli::main_with_args(std::env::args_os()));
}
