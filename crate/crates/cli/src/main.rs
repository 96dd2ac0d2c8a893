fn main() {
    std::process::exit(talift_cli::dispatch(std::env::args_os()));
}
