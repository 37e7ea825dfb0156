fn main() {
    std::process::exit(flicker_ews::cli::run_from(std::env::args_os()));
}
