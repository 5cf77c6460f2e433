fn main() {
    std::process::exit(mtcrec::cli::run(std::env::args_os()));
}
