fn main() {
    std::process::exit(shearmix::cli_io::main_with_args(std::env::args_os()));
}
