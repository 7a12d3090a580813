fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    std::process::exit(vseg_cli::run(std::env::args_os().collect()));
}
