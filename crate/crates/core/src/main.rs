fn main() {
    std::process::exit(cavecop::cli::run(std::env::args_os()));
}
