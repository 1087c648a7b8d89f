//! Append-only replay log.
//!
//! Layout (`docs/records.md`): a `"ANCL"` magic plus format version, then
//! length-prefixed entries `total_len(u32) ts(u64) kind(u8) body`. Appends
//! are written as a single buffered write per entry. A crash can leave a
//! partial entry at the tail; replay skips it with a warning instead of
//! failing, which is the behavior cold-restart recovery relies on.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use super::RecordError;

pub const LOG_MAGIC: [u8; 4] = *b"ANCL";
pub const LOG_FORMAT_VERSION: u32 = 1;

const ENTRY_FIXED: usize = 8 + 1; // ts + kind
const MAX_ENTRY_LEN: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    RecordWrite,
    Command,
    Event,
}

impl EntryKind {
    fn code(self) -> u8 {
        match self {
            EntryKind::RecordWrite => 0,
            EntryKind::Command => 1,
            EntryKind::Event => 2,
        }
    }

    fn from_code(c: u8) -> Option<EntryKind> {
        match c {
            0 => Some(EntryKind::RecordWrite),
            1 => Some(EntryKind::Command),
            2 => Some(EntryKind::Event),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayLogEntry {
    pub ts_monotonic_ns: u64,
    pub kind: EntryKind,
    pub body: Vec<u8>,
}

/// Appender. Entries are strictly time-ordered within one file; if the
/// caller's clock stalls, the writer nudges the stamp forward to keep the
/// ordering invariant.
pub struct ReplayLogWriter {
    file: File,
    last_ts: u64,
    sync_each: bool,
}

impl ReplayLogWriter {
    /// Creates the file (truncating any previous content) and writes the header.
    pub fn create(path: &Path) -> Result<ReplayLogWriter, RecordError> {
        let mut file = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.write_all(&LOG_MAGIC)?;
        file.write_all(&LOG_FORMAT_VERSION.to_le_bytes())?;
        file.flush()?;
        Ok(ReplayLogWriter {
            file,
            last_ts: 0,
            sync_each: false,
        })
    }

    /// Opens an existing log for appending, validating the header and
    /// discovering the last timestamp.
    pub fn open_append(path: &Path) -> Result<ReplayLogWriter, RecordError> {
        let result = replay_log(path)?;
        let last_ts = result.entries.last().map(|e| e.ts_monotonic_ns).unwrap_or(0);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(ReplayLogWriter {
            file,
            last_ts,
            sync_each: false,
        })
    }

    /// When set, each append is followed by `fdatasync`; the default is a
    /// plain write per entry.
    pub fn set_sync_each(&mut self, sync: bool) {
        self.sync_each = sync;
    }

    pub fn append(&mut self, kind: EntryKind, ts_monotonic_ns: u64, body: &[u8]) -> Result<(), RecordError> {
        let ts = if ts_monotonic_ns <= self.last_ts {
            self.last_ts + 1
        } else {
            ts_monotonic_ns
        };
        self.last_ts = ts;
        let total = (ENTRY_FIXED + body.len()) as u32;
        let mut buf = Vec::with_capacity(4 + total as usize);
        buf.extend_from_slice(&total.to_le_bytes());
        buf.extend_from_slice(&ts.to_le_bytes());
        buf.push(kind.code());
        buf.extend_from_slice(body);
        self.file.write_all(&buf)?;
        if self.sync_each {
            self.file.sync_data()?;
        }
        Ok(())
    }

    pub fn append_entry(&mut self, entry: &ReplayLogEntry) -> Result<(), RecordError> {
        self.append(entry.kind, entry.ts_monotonic_ns, &entry.body)
    }
}

/// Outcome of reading a log file back.
#[derive(Debug)]
pub struct ReplayResult {
    pub entries: Vec<ReplayLogEntry>,
    /// True when a partial or garbled tail entry was skipped.
    pub truncated_tail: bool,
}

/// Reads every complete entry in append order. A truncated or corrupt tail
/// is skipped with a warning (`truncated_tail` set), not an error; a bad
/// header is fatal.
pub fn replay_log(path: &Path) -> Result<ReplayResult, RecordError> {
    let mut file = File::open(path)?;
    let mut header = [0u8; 8];
    file.read_exact(&mut header)
        .map_err(|_| RecordError::LogCorrupt("file shorter than header".into()))?;
    if header[..4] != LOG_MAGIC {
        return Err(RecordError::LogCorrupt("bad log magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != LOG_FORMAT_VERSION {
        return Err(RecordError::VersionUnsupported(version));
    }

    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let mut entries = Vec::new();
    let mut pos = 0usize;
    let mut truncated_tail = false;
    while pos < rest.len() {
        if rest.len() - pos < 4 {
            truncated_tail = true;
            break;
        }
        let total = u32::from_le_bytes(rest[pos..pos + 4].try_into().unwrap());
        if total < ENTRY_FIXED as u32 || total > MAX_ENTRY_LEN {
            truncated_tail = true;
            break;
        }
        let total = total as usize;
        if rest.len() - pos - 4 < total {
            truncated_tail = true;
            break;
        }
        let ts = u64::from_le_bytes(rest[pos + 4..pos + 12].try_into().unwrap());
        let kind = match EntryKind::from_code(rest[pos + 12]) {
            Some(k) => k,
            None => {
                truncated_tail = true;
                break;
            }
        };
        let body = rest[pos + 13..pos + 4 + total].to_vec();
        entries.push(ReplayLogEntry {
            ts_monotonic_ns: ts,
            kind,
            body,
        });
        pos += 4 + total;
    }
    if truncated_tail {
        log::warn!(
            "replay log {}: skipping corrupt tail after {} entries",
            path.display(),
            entries.len()
        );
    }
    Ok(ReplayResult {
        entries,
        truncated_tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("anchor-log-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{}-{}.anchorlog", name, std::process::id()))
    }

    #[test]
    fn append_three_replay_three() {
        let path = tmp("roundtrip");
        let mut w = ReplayLogWriter::create(&path).unwrap();
        w.append(EntryKind::Command, 10, b"c1").unwrap();
        w.append(EntryKind::Event, 20, b"e1").unwrap();
        w.append(EntryKind::RecordWrite, 30, b"r1").unwrap();
        let r = replay_log(&path).unwrap();
        assert!(!r.truncated_tail);
        assert_eq!(r.entries.len(), 3);
        assert_eq!(r.entries[0].body, b"c1");
        assert_eq!(r.entries[1].kind, EntryKind::Event);
        assert_eq!(r.entries[2].ts_monotonic_ns, 30);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_tail_is_skipped_not_fatal() {
        let path = tmp("tail");
        let mut w = ReplayLogWriter::create(&path).unwrap();
        w.append(EntryKind::Command, 10, b"first").unwrap();
        w.append(EntryKind::Command, 20, b"second").unwrap();
        w.append(EntryKind::Command, 30, b"third-will-be-cut").unwrap();
        drop(w);
        let len = std::fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 5).unwrap(); // cut into the last entry's body
        let r = replay_log(&path).unwrap();
        assert!(r.truncated_tail);
        assert_eq!(r.entries.len(), 2);
        assert_eq!(r.entries[1].body, b"second");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn timestamps_are_strictly_increasing() {
        let path = tmp("ts");
        let mut w = ReplayLogWriter::create(&path).unwrap();
        w.append(EntryKind::Event, 100, b"a").unwrap();
        w.append(EntryKind::Event, 100, b"b").unwrap(); // stalled clock
        w.append(EntryKind::Event, 50, b"c").unwrap(); // regressing clock
        let r = replay_log(&path).unwrap();
        let ts: Vec<u64> = r.entries.iter().map(|e| e.ts_monotonic_ns).collect();
        assert!(ts.windows(2).all(|w| w[1] > w[0]), "got {ts:?}");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn empty_log_replays_empty() {
        let path = tmp("empty");
        ReplayLogWriter::create(&path).unwrap();
        let r = replay_log(&path).unwrap();
        assert!(r.entries.is_empty());
        assert!(!r.truncated_tail);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn open_append_continues_after_existing_entries() {
        let path = tmp("append");
        {
            let mut w = ReplayLogWriter::create(&path).unwrap();
            w.append(EntryKind::Command, 5, b"one").unwrap();
        }
        {
            let mut w = ReplayLogWriter::open_append(&path).unwrap();
            w.append(EntryKind::Command, 2, b"two").unwrap(); // behind last ts
        }
        let r = replay_log(&path).unwrap();
        assert_eq!(r.entries.len(), 2);
        assert!(r.entries[1].ts_monotonic_ns > r.entries[0].ts_monotonic_ns);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_is_fatal() {
        let path = tmp("badmagic");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(
            replay_log(&path),
            Err(RecordError::LogCorrupt(_))
        ));
        std::fs::remove_file(&path).unwrap();
    }
}
