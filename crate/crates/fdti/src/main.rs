use clap::Parser;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = fdti::cli::Cli::parse();
    if let Err(e) = fdti::cli::run(cli, argv) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
