use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = deepctrl::cli::Cli::parse();
    if let Err(e) = deepctrl::cli::run(cli) {
        eprintln!("error: kind={} message={:?}", e.kind(), e.to_string());
        std::process::exit(1);
    }
}
