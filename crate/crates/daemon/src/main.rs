use std::process::ExitCode;

use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let state = hermit_daemon::default_state_dir();
    let logical = std::env::var(hermit_daemon::STORE_VAR).ok().filter(|v| !v.is_empty());
    let result = hermit_daemon::store_config(&state, logical.as_deref())
        .and_then(|config| hermit_daemon::run(config, &hermit_daemon::socket_path(&state)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hermitd: {e}");
            ExitCode::FAILURE
        }
    }
}
