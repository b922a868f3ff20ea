//! Append-only record files.
//!
//! Each line holds one record: the lowercase hex form of its canonical
//! encoding, terminated by `\n`. Snapshots use the same line format and are
//! replaced atomically (write to a sibling temp file, then rename).

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use thiserror::Error;

use crate::codec::DecodeError;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("journal {path} line {line}: not hex")]
    Hex { path: PathBuf, line: usize },
    #[error("journal {path} line {line}: {source}")]
    Decode { path: PathBuf, line: usize, source: DecodeError },
}

impl JournalError {
    pub(crate) fn decode(path: &Path, line: usize, source: DecodeError) -> Self {
        JournalError::Decode { path: path.to_path_buf(), line, source }
    }
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, JournalError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|source| JournalError::Io { path: path.clone(), source })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| JournalError::Io { path: path.clone(), source })?;
        Ok(Self { path, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &[u8]) -> Result<(), JournalError> {
        let mut line = hex::encode(record);
        line.push('\n');
        let mut file = self.file.lock();
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| JournalError::Io { path: self.path.clone(), source })
    }
}

/// Reads every record of a line file; a missing file reads as empty.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Vec<u8>>, JournalError> {
    let path = path.as_ref();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(JournalError::Io { path: path.to_path_buf(), source }),
    };
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| JournalError::Io { path: path.to_path_buf(), source })?;
        if line.is_empty() {
            continue;
        }
        let bytes =
            hex::decode(line.trim_end()).map_err(|_| JournalError::Hex { path: path.to_path_buf(), line: idx + 1 })?;
        out.push(bytes);
    }
    Ok(out)
}

pub fn write_snapshot(path: impl AsRef<Path>, records: &[Vec<u8>]) -> Result<(), JournalError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let mut body = String::new();
    for r in records {
        body.push_str(&hex::encode(r));
        body.push('\n');
    }
    fs::write(&tmp, body)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|source| JournalError::Io { path: path.to_path_buf(), source })
}
