fn main() {
    std::process::exit(glsd::cli::main_exit_code());
}
