fn main() {
    mfjump::cli::init_workers();
    std::process::exit(mfjump::cli::run(std::env::args_os()));
}
