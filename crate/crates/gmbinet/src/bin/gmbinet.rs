fn main() {
    std::process::exit(gmbinet::cli::main_with(std::env::args_os().collect()));
}
