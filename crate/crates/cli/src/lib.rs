//! The `gfm` command-line tool: pipeline stages as subcommands sharing one
//! JSON configuration and a JSON-lines event log on stderr.

pub mod cli;
pub mod config;
pub mod util;

pub mod commands {
    pub mod bench;
    pub mod data;
    pub mod ensemble;
    pub mod search;
    pub mod train;
}

/// Installs the JSON-lines subscriber. `GFM_LOG_LEVEL` takes a level or any
/// filter directive; an unusable value falls back to `info`.
pub fn init_logging() {
    use tracing_subscriber::EnvFilter;
    let raw = std::env::var("GFM_LOG_LEVEL").unwrap_or_default();
    let (filter, bad) = match EnvFilter::try_new(if raw.is_empty() { "info" } else { &raw }) {
        Ok(f) => (f, false),
        Err(_) => (EnvFilter::new("info"), true),
    };
    let _ = tracing_subscriber::fmt().json().with_env_filter(filter).with_writer(std::io::stderr).try_init();
    if bad {
        tracing::warn!(event = "bad_log_level", value = %raw, "GFM_LOG_LEVEL not understood; using info");
    }
}
