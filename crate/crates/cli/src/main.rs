fn main() {
    std::process::exit(cmps_lab::run(std::env::args_os()));
}
