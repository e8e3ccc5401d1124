fn main() {
    std::process::exit(llab_workbench::cli::main_with(std::env::args().collect()));
}
