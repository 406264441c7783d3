fn main() {
    std::process::exit(thermoseg::cli::run(std::env::args_os()));
}
