fn main() {
    std::process::exit(lcsync_cli::run(std::env::args_os()));
}
