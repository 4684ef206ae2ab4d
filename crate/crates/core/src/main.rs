fn main() {
    std::process::exit(spikelab::cli::run(std::env::args_os()));
}
