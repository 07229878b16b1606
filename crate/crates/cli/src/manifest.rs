use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Hex SHA-256 of the resolved configuration's JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest.json` (command, version, seed, config hash and the
/// resolved config) into `dir`.
pub fn write_manifest<T: Serialize>(dir: &Path, command: &str, seed: Option<u64>, config: &T) -> CliResult<()> {
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config_hash": config_hash(config),
        "config": config,
    });
    let path = dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest).map_err(sentio_core::Error::from)? + "\n";
    std::fs::write(&path, body).map_err(|e| io_error(&path, e))?;
    Ok(())
}

pub fn io_error(path: &Path, source: std::io::Error) -> crate::config::CliError {
    crate::config::CliError::Run(sentio_core::Error::Io { path: path.display().to_string(), source })
}
