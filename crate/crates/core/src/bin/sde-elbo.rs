fn main() {
    std::process::exit(sde_elbo::cli::run(std::env::args_os()));
}
