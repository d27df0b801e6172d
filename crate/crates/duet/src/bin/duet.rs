fn main() {
    std::process::exit(duet::harness::main_entry());
}
