fn main() {
    std::process::exit(mgt_core::cli::run(std::env::args_os()));
}
