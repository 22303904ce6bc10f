fn main() {
    std::process::exit(glmm_deriv_cli::run(std::env::args_os()));
}
