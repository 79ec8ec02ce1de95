fn main() {
    std::process::exit(hybrid_qkd::cli::run_command(std::env::args_os()));
}
