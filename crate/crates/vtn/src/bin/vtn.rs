fn main() {
    std::process::exit(vtn::cli_main());
}
