fn main() {
    std::process::exit(msjq::cli::main_with_args(std::env::args_os()));
}
