use clap::Parser;
use pathflip::cli::Cli;

fn main() {
    let cli = Cli::parse();
    match pathflip::commands::run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
