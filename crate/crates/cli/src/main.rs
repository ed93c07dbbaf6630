fn main() {
    std::process::exit(sketchparse_cli::dispatch(std::env::args_os()));
}
