fn main() {
    std::process::exit(fenerf_interface::cli::dispatch(std::env::args_os()));
}
