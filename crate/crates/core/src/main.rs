fn main() {
    std::process::exit(lad_core::cli::main_with_args(std::env::args_os()));
}
