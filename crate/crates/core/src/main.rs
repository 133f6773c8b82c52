fn main() {
    std::process::exit(adacon::cli::dispatch(std::env::args_os()));
}
