fn main() {
    std::process::exit(difflab::labcli::main_with_args(std::env::args_os()));
}
