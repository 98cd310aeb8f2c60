fn main() {
    std::process::exit(rgbnir::cli::dispatch(std::env::args_os()));
}
