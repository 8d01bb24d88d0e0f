fn main() {
    std::process::exit(vi_init::cli::run(std::env::args_os()));
}
