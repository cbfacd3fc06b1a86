fn main() {
    std::process::exit(fgssnet::cli::run(std::env::args_os()));
}
