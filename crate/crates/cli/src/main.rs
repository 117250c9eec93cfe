fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(cospeech_cli::run(&args));
}
