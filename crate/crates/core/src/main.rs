fn main() {
    std::process::exit(cae_anomaly::cli::run(std::env::args_os()));
}
