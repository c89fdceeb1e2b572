fn main() {
    std::process::exit(pcdiff::harness::cli::run(std::env::args_os()));
}
