fn main() {
    std::process::exit(mtp_asr::cli::main());
}
