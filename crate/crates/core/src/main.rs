fn main() {
    std::process::exit(twofe::cli::run(std::env::args_os()));
}
