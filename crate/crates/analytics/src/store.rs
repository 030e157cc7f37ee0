//! Append-only JSONL annotation store, one file per task.
//!
//! ```text
//! <dir>/face.jsonl               AuAnnotation per line
//! <dir>/depth.jsonl              BoxAnnotation per line
//! <dir>/face.predictions.jsonl   AuPrediction per line
//! <dir>/depth.predictions.jsonl  BoxPrediction per line
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::{AnnotationError, AuAnnotation, AuPrediction, BoxAnnotation, BoxPrediction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Face,
    Depth,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Face => "face",
            Task::Depth => "depth",
        }
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "face" => Ok(Task::Face),
            "depth" => Ok(Task::Depth),
            other => Err(format!("unknown task {other:?} (expected face or depth)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Invalid(#[from] AnnotationError),
}

pub struct AnnotationStore {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl AnnotationStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| StoreError::Io { path: dir.clone(), source })?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn annotations_path(&self, task: Task) -> PathBuf {
        self.dir.join(format!("{}.jsonl", task.as_str()))
    }

    pub fn predictions_path(&self, task: Task) -> PathBuf {
        self.dir.join(format!("{}.predictions.jsonl", task.as_str()))
    }

    fn append<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(value).expect("annotation serializes");
        line.push('\n');
        let _g = self.write_lock.lock();
        let io_err = |source| StoreError::Io { path: path.to_owned(), source };
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        f.write_all(line.as_bytes()).map_err(io_err)?;
        f.sync_data().map_err(io_err)
    }

    pub fn append_au(&self, a: &AuAnnotation) -> Result<(), StoreError> {
        a.validate()?;
        self.append(&self.annotations_path(Task::Face), a)
    }

    /// Bounds are not known here; callers that know the image size should
    /// run [`BoxAnnotation::validate`] first.
    pub fn append_box(&self, a: &BoxAnnotation) -> Result<(), StoreError> {
        a.validate(u32::MAX, u32::MAX)?;
        self.append(&self.annotations_path(Task::Depth), a)
    }

    pub fn append_au_prediction(&self, p: &AuPrediction) -> Result<(), StoreError> {
        p.validate()?;
        self.append(&self.predictions_path(Task::Face), p)
    }

    pub fn append_box_prediction(&self, p: &BoxPrediction) -> Result<(), StoreError> {
        p.validate()?;
        self.append(&self.predictions_path(Task::Depth), p)
    }

    pub fn load_au(&self) -> Result<Vec<AuAnnotation>, StoreError> {
        read_jsonl(&self.annotations_path(Task::Face))
    }

    pub fn load_box(&self) -> Result<Vec<BoxAnnotation>, StoreError> {
        read_jsonl(&self.annotations_path(Task::Depth))
    }

    pub fn load_au_predictions(&self) -> Result<Vec<AuPrediction>, StoreError> {
        read_jsonl(&self.predictions_path(Task::Face))
    }

    pub fn load_box_predictions(&self) -> Result<Vec<BoxPrediction>, StoreError> {
        read_jsonl(&self.predictions_path(Task::Depth))
    }
}

/// Reads a JSONL file; a missing file is empty. A malformed final line is a
/// torn append and is dropped, a malformed line elsewhere is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(StoreError::Io { path: path.to_owned(), source }),
    };
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|source| StoreError::Io { path: path.to_owned(), source })?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) if Some(i) == last => {
                tracing::warn!(path = %path.display(), error = %e, "dropping torn final line");
            }
            Err(e) => {
                return Err(StoreError::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AuLabel;

    #[test]
    fn append_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let store = AnnotationStore::open(dir.path()).unwrap();
        let a = AuAnnotation {
            annotator_id: "ann".into(),
            item_id: "frame-1".into(),
            labels: vec![AuLabel::Smile],
            started_ts: 1,
            submitted_ts: 2,
            comment: Some("ok".into()),
            skipped: false,
        };
        store.append_au(&a).unwrap();
        let mut bad = a.clone();
        bad.submitted_ts = 0;
        assert!(store.append_au(&bad).is_err());
        // torn tail
        let mut f = OpenOptions::new().append(true).open(store.annotations_path(Task::Face)).unwrap();
        f.write_all(b"{\"annotator_id\":").unwrap();
        assert_eq!(store.load_au().unwrap(), vec![a]);
        assert!(store.load_box().unwrap().is_empty());
    }
}
