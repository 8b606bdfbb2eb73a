fn main() {
    std::process::exit(msdrop::cli::run(std::env::args_os().collect()));
}
