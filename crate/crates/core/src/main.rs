fn main() {
    m2sformer::cli::init_threads();
    std::process::exit(m2sformer::cli::dispatch(std::env::args_os()));
}
