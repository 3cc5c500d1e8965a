use clap::Parser;

fn main() {
    let cli = seglab_cli::Cli::parse();
    if let Err(e) = seglab_cli::run(cli) {
        eprintln!("seglab: {e}");
        std::process::exit(e.exit_code());
    }
}
