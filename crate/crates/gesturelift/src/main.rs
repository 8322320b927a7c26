fn main() {
    env_logger::init();
    std::process::exit(gesturelift::cli::run(std::env::args_os()));
}
