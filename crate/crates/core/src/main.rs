use clap::Parser;
use viewsplat::workbench::cli::{run, Cli};

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("viewsplat: {e}");
        std::process::exit(1);
    }
}
