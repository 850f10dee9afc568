fn main() {
    std::process::exit(cavit::cli::main());
}
