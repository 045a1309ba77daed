fn main() {
    std::process::exit(attnsim_cli::run(std::env::args_os()));
}
