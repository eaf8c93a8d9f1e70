fn main() {
    std::process::exit(dpot_cli::app::run(std::env::args_os()));
}
