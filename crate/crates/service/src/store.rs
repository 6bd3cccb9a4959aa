//! Append-only JSONL event log plus content-addressed blobs.
//!
//! Layout under the store root:
//! `events.jsonl` (one [`RunEvent`] per line) and `blobs/<aa>/<sha256>`.
//! An unterminated final line is a torn write; it is dropped (and truncated
//! away) when the store is opened.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};

use crate::run::{ArtifactRef, RunEvent};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const BLOBS_DIR: &str = "blobs";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("event log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("no blob {0}")]
    MissingBlob(String),
    #[error("blob {0} does not match its hash")]
    CorruptBlob(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parse log text. Returns the events and the byte length of the intact prefix.
pub fn parse_log(text: &str) -> Result<(Vec<RunEvent>, usize), StoreError> {
    let mut events = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if !line.ends_with('\n') {
            break;
        }
        let body = line.trim_end();
        if !body.is_empty() {
            let ev = serde_json::from_str(body).map_err(|e| StoreError::CorruptLog {
                line: i + 1,
                message: e.to_string(),
            })?;
            events.push(ev);
        }
        offset += line.len();
    }
    Ok((events, offset))
}

enum Log {
    Memory(String),
    File { path: PathBuf, file: File },
}

pub struct RunStore {
    root: Option<PathBuf>,
    log: Mutex<Log>,
    blobs: RwLock<HashMap<String, Arc<Vec<u8>>>>,
}

impl RunStore {
    /// A store that lives only as long as the process.
    pub fn in_memory() -> Self {
        Self {
            root: None,
            log: Mutex::new(Log::Memory(String::new())),
            blobs: RwLock::default(),
        }
    }

    /// Open (or create) a store directory and return it with its recovered events.
    pub fn open(root: &Path) -> Result<(Self, Vec<RunEvent>), StoreError> {
        fs::create_dir_all(root.join(BLOBS_DIR)).map_err(io_err(root))?;
        let path = root.join(EVENTS_FILE);
        let text = match fs::read(&path) {
            Ok(b) => String::from_utf8_lossy(&b).into_owned(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let (events, intact) = parse_log(&text)?;
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .map_err(io_err(&path))?;
        if intact < text.len() {
            tracing::warn!(
                dropped = text.len() - intact,
                "dropping torn tail of event log"
            );
            file.set_len(intact as u64).map_err(io_err(&path))?;
        }
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok((
            Self {
                root: Some(root.to_path_buf()),
                log: Mutex::new(Log::File { path, file }),
                blobs: RwLock::default(),
            },
            events,
        ))
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn blob_path(&self, hash: &str) -> Option<PathBuf> {
        self.root
            .as_ref()
            .map(|r| r.join(BLOBS_DIR).join(&hash[..2]).join(hash))
    }

    /// Store content and return its reference. Idempotent.
    pub fn put_blob(&self, bytes: &[u8], media_type: &str) -> Result<ArtifactRef, StoreError> {
        let hash = sha256_hex(bytes);
        match self.blob_path(&hash) {
            Some(path) => {
                if !path.exists() {
                    let dir = path.parent().expect("blob path has a parent");
                    fs::create_dir_all(dir).map_err(io_err(dir))?;
                    let tmp = dir.join(format!(".{hash}.{}", uuid::Uuid::new_v4().simple()));
                    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
                    fs::rename(&tmp, &path).map_err(io_err(&path))?;
                }
            }
            None => {
                self.blobs
                    .write()
                    .expect("blob map lock")
                    .entry(hash.clone())
                    .or_insert_with(|| Arc::new(bytes.to_vec()));
            }
        }
        Ok(ArtifactRef {
            hash,
            media_type: media_type.to_string(),
            size: bytes.len() as u64,
        })
    }

    /// Fetch content by hash, verifying it.
    pub fn get_blob(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StoreError::MissingBlob(hash.to_string()));
        }
        let bytes = match self.blob_path(hash) {
            Some(path) => match fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    return Err(StoreError::MissingBlob(hash.into()))
                }
                Err(e) => return Err(io_err(&path)(e)),
            },
            None => self
                .blobs
                .read()
                .expect("blob map lock")
                .get(hash)
                .map(|b| b.to_vec())
                .ok_or_else(|| StoreError::MissingBlob(hash.into()))?,
        };
        if sha256_hex(&bytes) != hash {
            return Err(StoreError::CorruptBlob(hash.into()));
        }
        Ok(bytes)
    }

    /// Append one event durably. Returns the event as it reads back from the
    /// log, which is the form every consumer (including replay) sees.
    pub fn append(&self, ev: &RunEvent) -> Result<RunEvent, StoreError> {
        let mut line = serde_json::to_string(ev).expect("events serialize");
        let canonical: RunEvent = serde_json::from_str(&line).expect("serialized events parse");
        line.push('\n');
        match &mut *self.log.lock().expect("log lock") {
            Log::Memory(text) => text.push_str(&line),
            Log::File { path, file } => {
                file.write_all(line.as_bytes()).map_err(io_err(path))?;
                file.sync_data().map_err(io_err(path))?;
            }
        }
        Ok(canonical)
    }

    /// The raw log text as persisted.
    pub fn log_text(&self) -> Result<String, StoreError> {
        match &*self.log.lock().expect("log lock") {
            Log::Memory(text) => Ok(text.clone()),
            Log::File { path, .. } => fs::read_to_string(path).map_err(io_err(path)),
        }
    }
}
