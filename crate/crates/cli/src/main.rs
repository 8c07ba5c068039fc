fn main() {
    std::process::exit(ngfn::main_with(std::env::args_os()));
}
