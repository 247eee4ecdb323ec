fn main() {
    skillloop::cli::init_tracing();
    std::process::exit(skillloop::cli::main_with_args(std::env::args_os()));
}
