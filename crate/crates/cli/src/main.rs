fn main() {
    std::process::exit(helios::run(std::env::args_os()));
}
