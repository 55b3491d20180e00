fn main() {
    std::process::exit(dic_core::cli::run(std::env::args_os()));
}
