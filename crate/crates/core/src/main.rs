fn main() {
    std::process::exit(zvonkin_lab::cli::main());
}
