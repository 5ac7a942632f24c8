fn main() {
    std::process::exit(favit::run())
}
