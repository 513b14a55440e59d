fn main() {
    std::process::exit(fair_denoise::cli::run(std::env::args_os()));
}
