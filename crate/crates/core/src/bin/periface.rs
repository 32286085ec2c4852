fn main() {
    std::process::exit(periface::cli::dispatch(std::env::args_os()));
}
