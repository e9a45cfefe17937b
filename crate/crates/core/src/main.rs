fn main() {
    std::process::exit(regret_forge_core::cli::cli_main(std::env::args_os()));
}
