use clap::Parser;

use tcam::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        let category = e.category();
        eprintln!("error [{}]: {e}", category.as_str());
        std::process::exit(category.exit_code());
    }
}
