fn main() {
    std::process::exit(trajclust::cli::main());
}
