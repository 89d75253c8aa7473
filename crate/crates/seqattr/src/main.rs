fn main() {
    std::process::exit(seqattr::cli::run(std::env::args_os()));
}
