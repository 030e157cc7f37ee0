//! Run manifests: what ran, with which effective configuration and seed.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    /// SHA-256 of the effective configuration, serialized as JSON.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub start_ts: i64,
    pub end_ts: Option<i64>,
    pub components: BTreeMap<String, String>,
    /// Digests of the outputs, keyed by name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, String>,
}

/// Digest of everything in `config` that can change an output. Field order
/// follows the struct definitions, so equal configs hash equally.
pub fn config_digest<T: Serialize + ?Sized>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

fn now_ms() -> i64 {
    chrono::Utc::now().timestamp_millis()
}

impl RunManifest {
    pub fn begin<T: Serialize + ?Sized>(command: &str, config: &T, seed: Option<u64>) -> Self {
        let components = ["icu-core", "icu-edge", "icu-transport", "icu-server", "icu-vision", "icu-metrics", "icu-analytics", "icu-cli"]
            .into_iter()
            .map(|c| (c.to_string(), VERSION.to_string()))
            .collect();
        Self {
            run_id: uuid::Uuid::new_v4().to_string(),
            command: command.into(),
            config_digest: config_digest(config),
            seed,
            start_ts: now_ms(),
            end_ts: None,
            components,
            outputs: BTreeMap::new(),
        }
    }

    pub fn output(&mut self, name: impl Into<String>, digest: impl Into<String>) {
        self.outputs.insert(name.into(), digest.into());
    }

    /// Stamps the end time and writes `<dir>/runs/<run_id>.json`.
    pub fn finish(mut self, dir: &Path) -> io::Result<PathBuf> {
        self.end_ts = Some(now_ms());
        let runs = dir.join("runs");
        std::fs::create_dir_all(&runs)?;
        let path = runs.join(format!("{}.json", self.run_id));
        let tmp = runs.join(format!(".{}.tmp", self.run_id));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self).expect("manifest serializes"))?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

pub fn file_digest(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
