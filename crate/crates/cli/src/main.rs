use clap::Parser;

fn main() {
    let cli = fvl_cli::Cli::parse();
    if let Err(e) = fvl_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
