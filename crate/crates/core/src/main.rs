fn main() {
    std::process::exit(livseg::cli::run(std::env::args_os()));
}
