fn main() {
    std::process::exit(pedsim_cli::run_cli(std::env::args_os()));
}
