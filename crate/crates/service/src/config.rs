use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trackscreen_core::store::DEFAULT_CACHE_SIZE;

pub const PORT_ENV: &str = "TRACKSCREEN_PORT";
pub const DB_ENV: &str = "TRACKSCREEN_DB";

/// Server settings, read from a TOML file:
///
/// ```toml
/// port = 8080
/// db_path = "trackscreen.db"
/// cache_size = 256
/// seed = 42
/// static_dir = "webui/dist"
/// ```
///
/// `TRACKSCREEN_PORT` and `TRACKSCREEN_DB` override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub db_path: PathBuf,
    /// Maximum number of cached screening pages.
    pub cache_size: usize,
    /// Seed for every detection run unless a request overrides it.
    pub seed: u64,
    /// Directory of static UI assets served under `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            db_path: PathBuf::from("trackscreen.db"),
            cache_size: DEFAULT_CACHE_SIZE,
            seed: 42,
            static_dir: None,
        }
    }
}

impl ServerConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<ServerConfig> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    /// Applies environment overrides from `lookup` (normally `std::env::var`).
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> anyhow::Result<ServerConfig> {
        if let Some(port) = lookup(PORT_ENV) {
            self.port = port
                .trim()
                .parse()
                .map_err(|_| anyhow::anyhow!("{PORT_ENV} must be a port number, got {port:?}"))?;
        }
        if let Some(db) = lookup(DB_ENV) {
            self.db_path = PathBuf::from(db);
        }
        Ok(self)
    }
}
