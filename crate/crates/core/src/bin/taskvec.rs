fn main() {
    std::process::exit(taskvec::cli::main_from(std::env::args_os()));
}
