use clap::Parser;
use picl_cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = execute(cli) {
        let code = e.exit_code();
        let err = anyhow::Error::new(e);
        eprintln!("error: {err:#}");
        std::process::exit(code);
    }
}
