use clap::Parser;

fn main() {
    let cli = normsoft_cli::Cli::parse();
    if let Err(e) = normsoft_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
