//! Gateway configuration file: versioned TOML, loaded and fully validated
//! before the service touches the network.
//!
//! Every field, with defaults in parentheses:
//!
//! ```toml
//! # Config format version. Must be 1.
//! version = 1
//!
//! # Path to the victim model file. Relative paths resolve against the
//! # directory containing this config file.
//! model_path = "victim.model"
//!
//! # Path to the detection profile JSON produced by `modelgate calibrate`.
//! profile_path = "profile.json"
//!
//! # Optional path to an ownership kit. When present, soft responses to
//! # carrier queries pass through the output watermark layer.
//! kit_path = "kit.json"
//!
//! # Optional path for flagged-query persistence. On graceful shutdown the
//! # store is flushed here as JSON lines; on startup an existing file is
//! # replayed into the store.
//! flagged_path = "flagged.jsonl"
//!
//! # TCP listen address. Port 0 binds an ephemeral port, printed on startup.
//! listen_addr = "127.0.0.1:0"
//!
//! # Response mode for requests that do not name one: "soft_label" or
//! # "hard_label". ("soft_label")
//! default_mode = "soft_label"
//!
//! # Record per-phase timings for every request. (true)
//! timing_enabled = true
//!
//! # Behavior window length in milliseconds. (1000)
//! window_interval_ms = 1000
//!
//! # Flagged-query store capacity; oldest entries evicted beyond it. (1024)
//! store_capacity = 1024
//!
//! # Cosine similarity at or above which a query counts as a near-duplicate
//! # of a flagged one. (0.95)
//! similarity_threshold = 0.95
//!
//! # Base seed for per-query response noise. (29019)
//! response_seed = 29019
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::response::ResponseMode;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub version: u32,
    pub model_path: PathBuf,
    pub profile_path: PathBuf,
    #[serde(default)]
    pub kit_path: Option<PathBuf>,
    #[serde(default)]
    pub flagged_path: Option<PathBuf>,
    #[serde(default = "default_listen")]
    pub listen_addr: String,
    #[serde(default = "default_mode")]
    pub default_mode: ResponseMode,
    #[serde(default = "default_true")]
    pub timing_enabled: bool,
    #[serde(default = "default_interval")]
    pub window_interval_ms: u64,
    #[serde(default = "default_capacity")]
    pub store_capacity: usize,
    #[serde(default = "default_similarity")]
    pub similarity_threshold: f64,
    #[serde(default = "default_seed")]
    pub response_seed: u64,
}

fn default_listen() -> String {
    "127.0.0.1:0".to_string()
}

fn default_mode() -> ResponseMode {
    ResponseMode::SoftLabel
}

fn default_true() -> bool {
    true
}

fn default_interval() -> u64 {
    1000
}

fn default_capacity() -> usize {
    1024
}

fn default_similarity() -> f64 {
    0.95
}

fn default_seed() -> u64 {
    29019
}

impl GatewayConfig {
    /// Parse and validate a config file. Relative paths inside the file are
    /// resolved against the file's own directory, so a config bundle can be
    /// moved as a unit.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: GatewayConfig = toml::from_str(&text)
            .map_err(|e| Error::Format(format!("bad config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.model_path = resolve(base, &config.model_path);
        config.profile_path = resolve(base, &config.profile_path);
        config.kit_path = config.kit_path.map(|p| resolve(base, &p));
        config.flagged_path = config.flagged_path.map(|p| resolve(base, &p));
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Format(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.window_interval_ms == 0 {
            return Err(Error::input("window_interval_ms must be positive"));
        }
        if self.store_capacity == 0 {
            return Err(Error::input("store_capacity must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold)
            || !self.similarity_threshold.is_finite()
        {
            return Err(Error::input("similarity_threshold must lie in [0,1]"));
        }
        if self.listen_addr.parse::<std::net::SocketAddr>().is_err() {
            return Err(Error::input(format!(
                "listen_addr {:?} is not a socket address",
                self.listen_addr
            )));
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("gateway.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "version = 1\nmodel_path = \"m.bin\"\nprofile_path = \"p.json\"\n",
        );
        let config = GatewayConfig::load(&path).unwrap();
        assert_eq!(config.model_path, dir.path().join("m.bin"));
        assert_eq!(config.profile_path, dir.path().join("p.json"));
        assert!(config.kit_path.is_none());
        assert_eq!(config.listen_addr, "127.0.0.1:0");
        assert_eq!(config.default_mode, ResponseMode::SoftLabel);
        assert!(config.timing_enabled);
        assert_eq!(config.window_interval_ms, 1000);
        assert_eq!(config.store_capacity, 1024);
        assert_eq!(config.similarity_threshold, 0.95);
    }

    #[test]
    fn absolute_paths_survive_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "version = 1\nmodel_path = \"{}\"\nprofile_path = \"p.json\"\n",
            dir.path().join("abs.model").display()
        );
        let path = write_config(dir.path(), &body);
        let config = GatewayConfig::load(&path).unwrap();
        assert_eq!(config.model_path, dir.path().join("abs.model"));
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "version = 2\nmodel_path = \"m\"\nprofile_path = \"p\"\n",
        );
        let err = GatewayConfig::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "version = 1\nmodel_path = \"m\"\nprofile_path = \"p\"\nmodle_path = \"typo\"\n",
        );
        assert!(GatewayConfig::load(&path).is_err());
    }

    #[test]
    fn bad_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for bad in [
            "window_interval_ms = 0",
            "store_capacity = 0",
            "similarity_threshold = 1.5",
            "listen_addr = \"not-an-addr\"",
        ] {
            let body = format!("version = 1\nmodel_path = \"m\"\nprofile_path = \"p\"\n{bad}\n");
            let path = write_config(dir.path(), &body);
            assert!(GatewayConfig::load(&path).is_err(), "accepted: {bad}");
        }
    }

    #[test]
    fn hard_label_default_mode_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "version = 1\nmodel_path = \"m\"\nprofile_path = \"p\"\ndefault_mode = \"hard_label\"\n",
        );
        let config = GatewayConfig::load(&path).unwrap();
        assert_eq!(config.default_mode, ResponseMode::HardLabel);
    }
}
