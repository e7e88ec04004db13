fn main() {
    env_logger::init();
    std::process::exit(hyperprompt::cli::main_from_env());
}
