fn main() {
    std::process::exit(kolflow_cli::cli::main());
}
