fn main() {
    std::process::exit(ein_seld_cli::run(std::env::args_os()));
}
