fn main() {
    std::process::exit(expertlab_cli::run(std::env::args_os()));
}
