//! Cart configuration file (TOML).
//!
//! ```toml
//! cart_id = "c1"
//! room_id = "room-101"
//! state_dir = "state/c1"          # outbox partitions and seq counters
//! key_file = "keys/c1.key"        # one line: "<key_id> <64 hex chars>"
//! codec = "deflate"               # or "raw"
//! autostart = true                # begin in Recording
//!
//! [broker]
//! addr = "127.0.0.1:5671"
//! server_identity = "broker"
//! credentials_dir = "pki"         # ca.pem, <cart_id>.pem, <cart_id>.key
//!
//! [control]                        # optional control/health link to the server
//! addr = "127.0.0.1:5672"
//! server_identity = "server"
//!
//! [[sensors]]
//! sensor_id = "rgb0"
//! modality = "RGB_FRAME"
//! seed = 11
//! [sensors.scenario]
//! faces = { segments = [[0, 1]] }
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use icu_core::{CartKey, Codec};
use serde::{Deserialize, Serialize};

use crate::sim::SensorSimConfig;

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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub addr: SocketAddr,
    pub server_identity: String,
    #[serde(default)]
    pub credentials_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartConfig {
    pub cart_id: String,
    pub room_id: String,
    pub state_dir: PathBuf,
    pub key_file: PathBuf,
    #[serde(default = "default_codec")]
    pub codec: String,
    #[serde(default = "default_true")]
    pub autostart: bool,
    /// Seeds the publisher's backoff jitter.
    #[serde(default)]
    pub seed: u64,
    pub broker: Option<LinkConfig>,
    pub control: Option<LinkConfig>,
    pub sensors: Vec<SensorSimConfig>,
}

fn default_codec() -> String {
    Codec::Deflate.id().to_owned()
}

fn default_true() -> bool {
    true
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), reason: reason.into() }
}

impl CartConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_owned(), message },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
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

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.state_dir);
        fix(&mut self.key_file);
        for link in [&mut self.broker, &mut self.control].into_iter().flatten() {
            if let Some(d) = &mut link.credentials_dir {
                fix(d);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [("cart_id", &self.cart_id), ("room_id", &self.room_id)] {
            if v.is_empty() {
                return Err(invalid(field, "must not be empty"));
            }
        }
        if self.cart_id.contains('.') {
            return Err(invalid("cart_id", "must not contain '.' (used in routing keys)"));
        }
        self.codec
            .parse::<Codec>()
            .map_err(|e| invalid("codec", e.to_string()))?;
        if self.sensors.is_empty() {
            return Err(invalid("sensors", "at least one sensor is required"));
        }
        let mut ids = HashSet::new();
        for (i, s) in self.sensors.iter().enumerate() {
            if s.sensor_id.is_empty() || s.sensor_id.contains(['/', '\\', '.']) {
                return Err(invalid(format!("sensors[{i}].sensor_id"), "must be a non-empty plain name"));
            }
            if !ids.insert(&s.sensor_id) {
                return Err(invalid(format!("sensors[{i}].sensor_id"), format!("duplicate `{}`", s.sensor_id)));
            }
            if s.rate_hz.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
                return Err(invalid(format!("sensors[{i}].rate_hz"), "must be positive"));
            }
            if s.modality.is_image() && (s.width < 16 || s.height < 16 || s.width > 4096 || s.height > 4096) {
                return Err(invalid(format!("sensors[{i}].width"), "image sides must be within 16..=4096"));
            }
        }
        Ok(())
    }

    pub fn load_key(&self) -> Result<CartKey, ConfigError> {
        let text = std::fs::read_to_string(&self.key_file).map_err(|source| ConfigError::Read {
            path: self.key_file.clone(),
            source,
        })?;
        let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        CartKey::parse_line(line).map_err(|e| invalid("key_file", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use icu_core::Modality;

    const SAMPLE: &str = r#"
cart_id = "c1"
room_id = "room-101"
state_dir = "state/c1"
key_file = "keys/c1.key"

[broker]
addr = "127.0.0.1:5671"
server_identity = "broker"
credentials_dir = "pki"

[[sensors]]
sensor_id = "rgb0"
modality = "RGB_FRAME"
seed = 11
[sensors.scenario]
faces = { segments = [[0, 2]] }

[[sensors]]
sensor_id = "emg0"
modality = "EMG"
seed = 12
"#;

    #[test]
    fn parses_sample_and_resolves_paths() {
        let mut cfg = CartConfig::parse(SAMPLE).unwrap();
        cfg.resolve_paths(Path::new("/etc/icu"));
        assert_eq!(cfg.state_dir, PathBuf::from("/etc/icu/state/c1"));
        assert_eq!(cfg.broker.as_ref().unwrap().credentials_dir.as_deref(), Some(Path::new("/etc/icu/pki")));
        assert_eq!(cfg.sensors[1].modality, Modality::Emg);
        assert_eq!(cfg.sensors[0].scenario.faces.at(100), 2);
        assert_eq!(cfg.codec, "deflate");
        assert!(cfg.autostart);
    }

    #[test]
    fn errors_name_the_field() {
        let dup = SAMPLE.replace("emg0", "rgb0");
        let err = CartConfig::parse(&dup).unwrap_err().to_string();
        assert!(err.contains("sensors[1].sensor_id"), "{err}");
        let bad_codec = SAMPLE.replace("key_file", "codec = \"zstd\"\nkey_file");
        assert!(CartConfig::parse(&bad_codec).unwrap_err().to_string().contains("codec"));
        let missing = SAMPLE.replace("room_id = \"room-101\"\n", "");
        assert!(CartConfig::parse(&missing).unwrap_err().to_string().contains("room_id"));
        let unknown = SAMPLE.replace("cart_id", "cart_name = \"x\"\ncart_id");
        assert!(CartConfig::parse(&unknown).unwrap_err().to_string().contains("cart_name"));
    }
}
