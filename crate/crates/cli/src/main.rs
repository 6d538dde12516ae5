fn main() {
    std::process::exit(iucl_cli::run(std::env::args_os()));
}
