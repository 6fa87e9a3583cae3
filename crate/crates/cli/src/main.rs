fn main() {
    std::process::exit(tueforge_cli::dispatch(std::env::args_os()));
}
