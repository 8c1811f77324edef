fn main() {
    std::process::exit(kam_core::cli::main(std::env::args_os()));
}
