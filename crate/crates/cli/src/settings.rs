use std::path::{Path, PathBuf};

use acc_core::clock::Timestamp;
use acc_core::service::ServiceConfig;
use acc_core::sim::FleetConfig;

use crate::CliError;

/// 2025-01-01T00:00:00Z
pub const DEFAULT_START: Timestamp = 1_735_689_600;
pub const DEFAULT_SEED: u64 = 1;

/// Config file values, or the built-in defaults without one.
pub fn load(path: Option<&Path>) -> Result<ServiceConfig, CliError> {
    match path {
        Some(p) => Ok(ServiceConfig::load(p)?),
        None => Ok(ServiceConfig::default()),
    }
}

/// The fleet named by the flag, else by the config, else the nine-house
/// default.
pub fn fleet(flag: Option<&Path>, config: &ServiceConfig) -> Result<FleetConfig, CliError> {
    let path: Option<PathBuf> = flag.map(Path::to_path_buf).or_else(|| config.fleet.clone());
    match path {
        Some(p) => Ok(FleetConfig::load(&p)?),
        None => Ok(FleetConfig::default_fleet(DEFAULT_SEED, DEFAULT_START)),
    }
}

/// Refuses to reuse a store that already holds data.
pub fn fresh_store_dir(dir: &Path) -> Result<(), CliError> {
    match std::fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(CliError::Config(format!(
                    "store directory {} is not empty",
                    dir.display()
                )));
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(CliError::io(dir)(e)),
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(CliError::io(path))
}

pub fn emit(args: std::fmt::Arguments<'_>) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{args}");
}

pub fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn interrupted() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = match signal(SignalKind::terminate()) {
            Ok(s) => s,
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
                return;
            }
        };
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}
