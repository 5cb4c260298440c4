fn main() {
    std::process::exit(fcrseg_core::cli::main(std::env::args_os()));
}
