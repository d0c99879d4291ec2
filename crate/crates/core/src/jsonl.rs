//! Append-only JSON-lines files.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Writer that appends one record per line and syncs after each append,
/// so a crash can only ever lose a trailing partial line.
#[derive(Debug)]
pub struct JsonlAppender {
    path: PathBuf,
    file: File,
    durable: bool,
}

impl JsonlAppender {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, JsonlError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|source| JsonlError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| JsonlError::Io { path: path.clone(), source })?;
        Ok(Self { path, file, durable: true })
    }

    /// Skips fsync; for scratch outputs where durability does not matter.
    pub fn without_sync(mut self) -> Self {
        self.durable = false;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), JsonlError> {
        let mut line = serde_json::to_vec(record).expect("record serializes");
        line.push(b'\n');
        self.append_raw(&line)
    }

    /// Appends an already-serialized line (a trailing newline is added if absent).
    pub fn append_line(&mut self, line: &str) -> Result<(), JsonlError> {
        let mut buf = line.as_bytes().to_vec();
        if buf.last() != Some(&b'\n') {
            buf.push(b'\n');
        }
        self.append_raw(&buf)
    }

    fn append_raw(&mut self, buf: &[u8]) -> Result<(), JsonlError> {
        let io_err = |source| JsonlError::Io {
            path: self.path.clone(),
            source,
        };
        // One write call per record keeps concurrent appenders line-atomic.
        self.file.write_all(buf).map_err(io_err)?;
        if self.durable {
            self.file.sync_data().map_err(io_err)?;
        }
        Ok(())
    }
}

/// Reads every non-blank line as `T`; any parse failure is an error.
pub fn read_all<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        n: u32,
    }

    #[test]
    fn append_then_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/log.jsonl");
        let mut w = JsonlAppender::open(&path).unwrap();
        w.append(&Rec { n: 1 }).unwrap();
        w.append_line("{\"n\":2}").unwrap();
        drop(w);
        let mut w = JsonlAppender::open(&path).unwrap();
        w.append(&Rec { n: 3 }).unwrap();
        let got: Vec<Rec> = read_all(&path).unwrap();
        assert_eq!(got, vec![Rec { n: 1 }, Rec { n: 2 }, Rec { n: 3 }]);
    }

    #[test]
    fn partial_line_is_reported_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        std::fs::write(&path, "{\"n\":1}\n{\"n\":").unwrap();
        match read_all::<Rec>(&path) {
            Err(JsonlError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
