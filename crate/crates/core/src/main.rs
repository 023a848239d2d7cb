fn main() {
    std::process::exit(headsim::cli::dispatch(std::env::args_os()));
}
