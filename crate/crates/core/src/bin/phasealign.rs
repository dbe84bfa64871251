fn main() {
    std::process::exit(phasealign::cli::main_with_args(std::env::args_os()));
}
