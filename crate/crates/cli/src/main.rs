fn main() {
    std::process::exit(oamp_cli::run(std::env::args_os()));
}
