fn main() {
    std::process::exit(sacnet::cli::run(std::env::args_os()));
}
