fn main() {
    std::process::exit(blowuplab::cli::main_entry());
}
