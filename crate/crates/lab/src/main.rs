fn main() {
    std::process::exit(gstop::run(std::env::args()));
}
