fn main() {
    std::process::exit(audio_sds::cli::main_with_args(std::env::args_os()));
}
