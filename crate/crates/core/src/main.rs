fn main() {
    std::process::exit(redirtrans::cli::main(std::env::args_os()));
}
