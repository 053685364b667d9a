use clap::Parser;
use mvsv_cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout();
    if let Err(e) = run(cli, &mut stdout) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
