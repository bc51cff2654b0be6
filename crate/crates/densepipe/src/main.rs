fn main() {
    std::process::exit(densepipe::dispatch(&std::env::args().collect::<Vec<_>>()[1..]));
}
