fn main() {
    std::process::exit(dsfnet_cli::run(std::env::args_os()));
}
