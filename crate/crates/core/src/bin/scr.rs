fn main() {
    std::process::exit(scr::cli::main_with_args(std::env::args_os()));
}
