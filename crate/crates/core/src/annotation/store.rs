//! Append-only label log.
//!
//! Layout of a store directory:
//!
//! ```text
//! LOCK                      held for the lifetime of the open store
//! labels.log                active segment, one JSON record per line
//! segments/labels-NNNNNN.log  sealed segments, oldest first
//! ```
//!
//! An append is acknowledged only after the line has been written and
//! `fdatasync`ed. A crash can leave at most one partial line at the end of the
//! active segment; it is truncated away on the next open.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::labels::{LabelRecord, Source};

const ACTIVE: &str = "labels.log";
const SEGMENTS: &str = "segments";
const LOCK: &str = "LOCK";
pub const DEFAULT_ROTATE_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended,
    /// Same codes and confidences as the current record for this source; nothing written.
    Duplicate,
}

pub struct LabelStore {
    dir: PathBuf,
    active: File,
    active_len: u64,
    rotate_bytes: u64,
    next_segment: u32,
    records: Vec<LabelRecord>,
    current: HashMap<(String, Source), usize>,
    repaired_bytes: u64,
    _lock: File,
}

impl std::fmt::Debug for LabelStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LabelStore")
            .field("dir", &self.dir)
            .field("records", &self.records.len())
            .finish()
    }
}

impl LabelStore {
    pub fn open(dir: &Path) -> Result<Self> {
        Self::open_with(dir, DEFAULT_ROTATE_BYTES)
    }

    pub fn open_with(dir: &Path, rotate_bytes: u64) -> Result<Self> {
        let segdir = dir.join(SEGMENTS);
        fs::create_dir_all(&segdir).map_err(|e| Error::io(&segdir, e))?;

        let lock_path = dir.join(LOCK);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(Error::Locked(dir.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => return Err(Error::io(&lock_path, e)),
        }

        let mut records = Vec::new();
        let mut next_segment = 1;
        for (n, path) in sealed_segments(&segdir)? {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (parsed, good) = parse_lines(&bytes)?;
            if good != bytes.len() {
                return Err(Error::Record {
                    line: parsed.len() + 1,
                    message: format!("{} ends in a partial record", path.display()),
                });
            }
            records.extend(parsed);
            next_segment = n + 1;
        }

        let active_path = dir.join(ACTIVE);
        let mut active = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .append(true)
            .open(&active_path)
            .map_err(|e| Error::io(&active_path, e))?;
        let mut bytes = Vec::new();
        active.read_to_end(&mut bytes).map_err(|e| Error::io(&active_path, e))?;
        let (parsed, good) = parse_lines(&bytes)?;
        let repaired_bytes = (bytes.len() - good) as u64;
        if repaired_bytes > 0 {
            active.set_len(good as u64).map_err(|e| Error::io(&active_path, e))?;
            active.sync_all().map_err(|e| Error::io(&active_path, e))?;
        }
        records.extend(parsed);
        sync_dir(dir)?;

        let mut store = LabelStore {
            dir: dir.to_path_buf(),
            active,
            active_len: good as u64,
            rotate_bytes,
            next_segment,
            records: Vec::with_capacity(records.len()),
            current: HashMap::new(),
            repaired_bytes,
            _lock: lock,
        };
        for r in records {
            store.index(r);
        }
        Ok(store)
    }

    /// Reads every record without taking the lock or repairing a torn tail.
    ///
    /// Safe to call while another process holds the store open.
    pub fn read_snapshot(dir: &Path) -> Result<Vec<LabelRecord>> {
        let mut records = Vec::new();
        let segdir = dir.join(SEGMENTS);
        if segdir.is_dir() {
            for (_, path) in sealed_segments(&segdir)? {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                records.extend(parse_lines(&bytes)?.0);
            }
        }
        let active_path = dir.join(ACTIVE);
        match fs::read(&active_path) {
            Ok(bytes) => records.extend(parse_lines(&bytes)?.0),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(&active_path, e)),
        }
        Ok(records)
    }

    fn index(&mut self, record: LabelRecord) {
        self.current
            .insert((record.utterance_id.clone(), record.source.clone()), self.records.len());
        self.records.push(record);
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Bytes of partial records dropped from the active segment when opening.
    pub fn repaired_bytes(&self) -> u64 {
        self.repaired_bytes
    }

    /// Every record in log order.
    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Latest record per (utterance, source), in log order.
    pub fn current_view(&self) -> Vec<&LabelRecord> {
        let mut idx: Vec<usize> = self.current.values().copied().collect();
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.records[i]).collect()
    }

    pub fn current(&self, utterance_id: &str, source: &Source) -> Option<&LabelRecord> {
        self.current
            .get(&(utterance_id.to_string(), source.clone()))
            .map(|&i| &self.records[i])
    }

    /// Validates, writes and syncs one record. Returns only once the record is durable.
    pub fn append(&mut self, record: LabelRecord) -> Result<AppendOutcome> {
        record.validate()?;
        if let Some(prev) = self.current(&record.utterance_id, &record.source) {
            if prev.code_set() == record.code_set() && prev.confidence == record.confidence {
                return Ok(AppendOutcome::Duplicate);
            }
        }
        let mut line = serde_json::to_vec(&record).map_err(|e| Error::Invalid(e.to_string()))?;
        line.push(b'\n');
        let path = self.dir.join(ACTIVE);
        self.active.write_all(&line).map_err(|e| Error::io(&path, e))?;
        self.active.sync_data().map_err(|e| Error::io(&path, e))?;
        self.active_len += line.len() as u64;
        self.index(record);
        if self.active_len >= self.rotate_bytes {
            self.rotate()?;
        }
        Ok(AppendOutcome::Appended)
    }

    /// Seals the active segment by renaming it into `segments/` and starts a new one.
    pub fn rotate(&mut self) -> Result<()> {
        if self.active_len == 0 {
            return Ok(());
        }
        let from = self.dir.join(ACTIVE);
        let segdir = self.dir.join(SEGMENTS);
        let to = segdir.join(segment_name(self.next_segment));
        self.active.sync_all().map_err(|e| Error::io(&from, e))?;
        fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        sync_dir(&segdir)?;
        self.active = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .append(true)
            .open(&from)
            .map_err(|e| Error::io(&from, e))?;
        sync_dir(&self.dir)?;
        self.active_len = 0;
        self.next_segment += 1;
        Ok(())
    }
}

fn segment_name(n: u32) -> String {
    format!("labels-{n:06}.log")
}

fn sealed_segments(segdir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(segdir).map_err(|e| Error::io(segdir, e))? {
        let entry = entry.map_err(|e| Error::io(segdir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(n) = name
            .strip_prefix("labels-")
            .and_then(|s| s.strip_suffix(".log"))
            .and_then(|s| s.parse::<u32>().ok())
        {
            out.push((n, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Parses complete lines; returns the records and the byte length of the valid prefix.
///
/// A trailing fragment without a newline, or an unparsable final line, is
/// treated as a torn write. An unparsable line followed by valid data is corruption.
fn parse_lines(bytes: &[u8]) -> Result<(Vec<LabelRecord>, usize)> {
    let mut records = Vec::new();
    let mut good = 0;
    let mut start = 0;
    let mut line_no = 0;
    while let Some(off) = bytes[start..].iter().position(|&b| b == b'\n') {
        let end = start + off;
        line_no += 1;
        let line = &bytes[start..end];
        let parsed = serde_json::from_slice::<LabelRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => {
                records.push(r);
                good = end + 1;
            }
            Err(message) => {
                if bytes[end + 1..].iter().all(|b| b.is_ascii_whitespace() || *b == 0) {
                    return Ok((records, good));
                }
                return Err(Error::Record { line: line_no, message });
            }
        }
        start = end + 1;
    }
    Ok((records, good))
}

fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)
        .and_then(|d| d.sync_all())
        .map_err(|e| Error::io(dir, e))
}
