fn main() {
    std::process::exit(lifespan_lab::cli::run(std::env::args_os()));
}
