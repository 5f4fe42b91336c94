fn main() {
    std::process::exit(transit_reid::cli::main_with_args(std::env::args_os()));
}
