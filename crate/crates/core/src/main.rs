fn main() {
    std::process::exit(cscrl::cli::dispatch(std::env::args_os()));
}
