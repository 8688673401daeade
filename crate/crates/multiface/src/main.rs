use clap::Parser;
use multiface::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    run(Cli::parse())
}
