fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut stdout = std::io::stdout().lock();
    std::process::exit(cotedit_cli::run(std::env::args_os(), &mut stdout));
}
