//! Append-only line-delimited event log.
//!
//! A record is acknowledged only after its full line, newline included, has
//! been written and synced. An unterminated tail is therefore an
//! unacknowledged write and is cut off on open.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::ServiceError;

pub struct EventLog<E> {
    path: PathBuf,
    file: File,
    _event: PhantomData<E>,
}

impl<E: Serialize + DeserializeOwned> EventLog<E> {
    /// Opens (creating if needed) and returns every complete record.
    pub fn open(path: &Path) -> Result<(Self, Vec<E>), ServiceError> {
        let io_err = |source| ServiceError::Io {
            path: path.to_path_buf(),
            source,
        };
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(e)),
        };
        let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        let mut events = Vec::new();
        for (n, line) in bytes[..complete].split(|b| *b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let event = serde_json::from_slice(line).map_err(|e| ServiceError::CorruptLog {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            events.push(event);
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        if complete < bytes.len() {
            file.set_len(complete as u64).map_err(io_err)?;
            file.sync_all().map_err(io_err)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                _event: PhantomData,
            },
            events,
        ))
    }

    /// Writes one record and syncs it to disk.
    pub fn append(&mut self, event: &E) -> io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.file.sync_data()
    }

    /// Atomically replaces the whole log with `events`.
    pub fn rewrite(&mut self, events: &[E]) -> io::Result<()> {
        let tmp = self.path.with_extension("log.tmp");
        {
            let mut f = File::create(&tmp)?;
            for e in events {
                let mut line = serde_json::to_vec(e).map_err(io::Error::other)?;
                line.push(b'\n');
                f.write_all(&line)?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        if let Some(dir) = self.path.parent() {
            // Persist the rename itself; not every platform allows this.
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}
