use clap::Parser;

fn main() {
    let cli = e4srec_cli::Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "warn" } else { "info" }))
        .format_timestamp(None)
        .init();
    if let Err(e) = e4srec_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
