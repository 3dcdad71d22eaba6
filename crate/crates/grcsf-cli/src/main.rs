fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(grcsf_cli::run(&argv));
}
