fn main() {
    std::process::exit(tfr::cli::run_command(std::env::args_os()));
}
