use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = asym_metric_cli::Cli::parse();
    std::process::exit(asym_metric_cli::run(cli));
}
