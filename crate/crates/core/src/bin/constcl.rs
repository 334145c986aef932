fn main() {
    std::process::exit(constcl::cli::run(std::env::args_os()));
}
