fn main() {
    std::process::exit(layerseg::cli::run(std::env::args_os()));
}
