//! Server configuration file (TOML).
//!
//! ```toml
//! data_dir = "data"
//! pseudonym_key_file = "keys/pseudonym.key"   # hex, at least 16 bytes
//! keyring_file = "keys/carts.keys"            # "<key_id> <hex>" per line
//! feed_file = "feed.jsonl"                    # clinical feed, reloaded when it changes
//! annotations_dir = "annotations"
//! metrics_dir = "metrics"
//! http_bind = "127.0.0.1:8080"
//! carts = ["c1", "c2"]                        # consumed queues and health roster
//!
//! [broker]
//! mode = "embedded"                           # or "remote"
//! addr = "127.0.0.1:5671"                     # bind (embedded) or connect (remote)
//! credentials_dir = "pki"
//! state_dir = "broker"                        # embedded only
//!
//! [control]                                    # optional
//! bind = "127.0.0.1:5672"
//! credentials_dir = "pki"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrokerMode {
    Embedded,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerLink {
    pub mode: BrokerMode,
    pub addr: SocketAddr,
    pub credentials_dir: PathBuf,
    /// Our certificate identity.
    #[serde(default = "default_server_identity")]
    pub identity: String,
    /// The broker's identity (remote) or the one we present (embedded).
    #[serde(default = "default_broker_identity")]
    pub broker_identity: String,
    #[serde(default)]
    pub state_dir: Option<PathBuf>,
    #[serde(default = "default_prefetch")]
    pub prefetch: u16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlListen {
    pub bind: SocketAddr,
    pub credentials_dir: PathBuf,
    #[serde(default = "default_server_identity")]
    pub identity: String,
}

fn default_server_identity() -> String {
    "server".into()
}
fn default_broker_identity() -> String {
    "broker".into()
}
fn default_prefetch() -> u16 {
    64
}
fn default_true() -> bool {
    true
}
fn default_http() -> SocketAddr {
    "127.0.0.1:8080".parse().unwrap()
}
fn default_reload() -> u64 {
    5_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    pub pseudonym_key_file: PathBuf,
    pub keyring_file: PathBuf,
    pub feed_file: PathBuf,
    #[serde(default = "annotations_default")]
    pub annotations_dir: PathBuf,
    #[serde(default = "metrics_default")]
    pub metrics_dir: PathBuf,
    #[serde(default = "default_http")]
    pub http_bind: SocketAddr,
    pub carts: Vec<String>,
    /// fsync records and manifests before acknowledging.
    #[serde(default = "default_true")]
    pub sync: bool,
    #[serde(default = "default_reload")]
    pub feed_reload_ms: u64,
    pub broker: BrokerLink,
    #[serde(default)]
    pub control: Option<ControlListen>,
}

fn annotations_default() -> PathBuf {
    "annotations".into()
}
fn metrics_default() -> PathBuf {
    "metrics".into()
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_owned(), message },
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.carts.is_empty() {
            return Err(invalid("carts", "at least one cart is required"));
        }
        let mut seen = HashSet::new();
        for (i, c) in self.carts.iter().enumerate() {
            if icu_transport::RoutingKey::new(c, icu_core::Modality::Noise).is_err() {
                return Err(invalid(&format!("carts[{i}]"), format!("{c:?} is not a valid cart id")));
            }
            if !seen.insert(c) {
                return Err(invalid(&format!("carts[{i}]"), format!("duplicate cart {c:?}")));
            }
        }
        if self.broker.mode == BrokerMode::Embedded && self.broker.state_dir.is_none() {
            return Err(invalid("broker.state_dir", "required when broker.mode = \"embedded\""));
        }
        if self.broker.prefetch == 0 {
            return Err(invalid("broker.prefetch", "must be positive"));
        }
        if self.feed_reload_ms == 0 {
            return Err(invalid("feed_reload_ms", "must be positive"));
        }
        Ok(())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.pseudonym_key_file);
        fix(&mut self.keyring_file);
        fix(&mut self.feed_file);
        fix(&mut self.annotations_dir);
        fix(&mut self.metrics_dir);
        fix(&mut self.broker.credentials_dir);
        if let Some(s) = &mut self.broker.state_dir {
            fix(s);
        }
        if let Some(c) = &mut self.control {
            fix(&mut c.credentials_dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
data_dir = "data"
pseudonym_key_file = "k"
keyring_file = "ring"
feed_file = "feed.jsonl"
carts = ["c1", "c2"]
[broker]
mode = "embedded"
addr = "127.0.0.1:0"
credentials_dir = "pki"
state_dir = "broker"
"#;

    #[test]
    fn parses_and_resolves() {
        let mut c = ServerConfig::parse(GOOD).unwrap();
        assert_eq!(c.http_bind.port(), 8080);
        assert!(c.sync);
        c.resolve_paths(Path::new("/etc/icu"));
        assert_eq!(c.data_dir, PathBuf::from("/etc/icu/data"));
        assert_eq!(c.broker.state_dir, Some(PathBuf::from("/etc/icu/broker")));
    }

    #[test]
    fn errors_name_the_field() {
        let e = ServerConfig::parse(&GOOD.replace("\"c2\"", "\"c1\"")).unwrap_err();
        assert!(e.to_string().contains("carts[1]"), "{e}");
        let e = ServerConfig::parse(&GOOD.replace("state_dir = \"broker\"\n", "")).unwrap_err();
        assert!(e.to_string().contains("broker.state_dir"), "{e}");
        let e = ServerConfig::parse(&GOOD.replace("feed_file = \"feed.jsonl\"\n", "")).unwrap_err();
        assert!(e.to_string().contains("feed_file"), "{e}");
        let e = ServerConfig::parse(&format!("{GOOD}\nbogus = 1")).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }
}
