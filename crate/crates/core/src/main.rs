use clap::Parser;
use speechstyle::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let result = run(cli, &mut std::io::stdout().lock());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(exit_code(&result));
}
