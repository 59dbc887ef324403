fn main() {
    std::process::exit(textcam::cli::main_with_args(std::env::args_os()));
}
