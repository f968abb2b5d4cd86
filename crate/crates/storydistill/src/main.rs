fn main() {
    std::process::exit(storydistill::run_cli());
}
