fn main() {
    std::process::exit(mergeretro_cli::run());
}
