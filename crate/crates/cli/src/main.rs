fn main() {
    std::process::exit(gpcs_cli::run(std::env::args_os()));
}
