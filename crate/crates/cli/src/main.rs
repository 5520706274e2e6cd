use clap::Parser;
use mvdet::commands::{dispatch, Cli};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MVDET_LOG", "warn")).init();
    let cli = Cli::parse();
    dispatch(&cli)
}
