use clap::Parser;

use fmoe_bench::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("fmoe: {e}");
        std::process::exit(e.exit_code());
    }
}
