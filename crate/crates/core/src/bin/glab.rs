fn main() {
    std::process::exit(guidance_lab::cli::run(std::env::args_os()));
}
