fn main() {
    std::process::exit(gliomaseg::cli::main_with_args(std::env::args_os()));
}
