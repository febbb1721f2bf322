fn main() {
    std::process::exit(multimorb::cli::main_with_args(std::env::args_os()));
}
