fn main() {
    std::process::exit(blursplat::cli::run_cli(std::env::args_os()));
}
