fn main() {
    std::process::exit(dsclf::cli::main());
}
