fn main() {
    std::process::exit(ussl_core::cli::dispatch(std::env::args_os()));
}
