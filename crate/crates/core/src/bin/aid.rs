fn main() {
    std::process::exit(aid_core::cli::run(std::env::args_os()));
}
