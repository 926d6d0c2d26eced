//! Append-only snapshot log.
//!
//! The log is one JSON object per line. A record is committed once its
//! terminating newline is on disk; a trailing fragment without one is what a
//! crash mid-append leaves behind, and is discarded when the store is opened
//! for writing. Any other unparseable line is corruption and is reported, not
//! skipped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::TrackingList;
use crate::fusion::InventorySnapshot;

#[derive(Debug, Error)]
pub enum InventoryError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("snapshot at {attempted} is not after the latest stored snapshot at {previous}")]
    NonMonotonic {
        previous: DateTime<Utc>,
        attempted: DateTime<Utc>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> InventoryError + '_ {
    move |source| InventoryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Complete records of a JSON-lines file plus the byte length they occupy.
struct Parsed<T> {
    records: Vec<T>,
    committed_len: u64,
    torn_tail: bool,
}

fn parse_jsonl<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<Parsed<T>, InventoryError> {
    let committed_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut records = Vec::new();
    for (i, line) in bytes[..committed_len].split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let rec = serde_json::from_slice(line).map_err(|e| InventoryError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(Parsed {
        records,
        committed_len: committed_len as u64,
        torn_tail: committed_len < bytes.len(),
    })
}

/// Read every committed record of a JSON-lines file. A missing file reads as
/// empty; a torn trailing fragment is ignored.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, InventoryError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    Ok(parse_jsonl(path, &bytes)?.records)
}

/// A JSON-lines file opened for appending whole records.
pub struct JsonlWriter {
    path: PathBuf,
    file: File,
    len: u64,
}

impl JsonlWriter {
    /// Open (creating if needed), take an exclusive advisory lock held until
    /// the writer is dropped, and cut off any torn trailing fragment.
    pub fn open<T: DeserializeOwned>(path: &Path) -> Result<(Self, Vec<T>), InventoryError> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(io_err(path))?;
        file.lock().map_err(io_err(path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err(path))?;
        let parsed = parse_jsonl(path, &bytes)?;
        if parsed.torn_tail {
            warn!(
                "{}: discarding {} bytes of an incomplete trailing record",
                path.display(),
                bytes.len() as u64 - parsed.committed_len
            );
            file.set_len(parsed.committed_len).map_err(io_err(path))?;
            file.sync_data().map_err(io_err(path))?;
        }
        let writer = Self {
            path: path.to_path_buf(),
            file,
            len: parsed.committed_len,
        };
        Ok((writer, parsed.records))
    }

    /// Append one record durably. On failure the file is cut back to its
    /// previous length so no partial record remains.
    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), InventoryError> {
        let mut line = serde_json::to_vec(record).expect("records are always serializable");
        line.push(b'\n');
        let result = self
            .file
            .seek(SeekFrom::Start(self.len))
            .and_then(|_| self.file.write_all(&line))
            .and_then(|_| self.file.sync_data());
        match result {
            Ok(()) => {
                self.len += line.len() as u64;
                Ok(())
            }
            Err(e) => {
                let _ = self.file.set_len(self.len);
                Err(io_err(&self.path)(e))
            }
        }
    }

    /// Drop every record.
    pub fn clear(&mut self) -> Result<(), InventoryError> {
        self.file.set_len(0).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))?;
        self.len = 0;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// A stored snapshot and its position in the log, starting at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub snapshot: InventorySnapshot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CurrentCounts {
    pub counts: BTreeMap<String, u32>,
    /// Nothing has been observed yet; counts are placeholders.
    pub no_observations: bool,
}

/// Current counts implied by a log: the latest snapshot's, or zeros for the
/// tracked categories when there is none.
pub fn replay(records: &[SnapshotRecord], tracking: &TrackingList) -> CurrentCounts {
    match records.last() {
        Some(r) => CurrentCounts {
            counts: r.snapshot.counts.clone(),
            no_observations: false,
        },
        None => CurrentCounts {
            counts: tracking.categories().map(|c| (c.as_str().to_string(), 0)).collect(),
            no_observations: true,
        },
    }
}

fn check_log(path: &Path, records: &[SnapshotRecord]) -> Result<(), InventoryError> {
    for (i, pair) in records.windows(2).enumerate() {
        let corrupt = |message: String| InventoryError::Corrupt {
            path: path.to_path_buf(),
            line: i + 2,
            message,
        };
        if pair[1].snapshot.timestamp <= pair[0].snapshot.timestamp {
            return Err(corrupt("timestamps are not strictly increasing".into()));
        }
        if pair[1].seq <= pair[0].seq {
            return Err(corrupt("sequence numbers are not increasing".into()));
        }
    }
    Ok(())
}

/// Read a snapshot log without taking the writer lock. Only fully appended
/// records are returned.
pub fn read_snapshots(path: &Path) -> Result<Vec<SnapshotRecord>, InventoryError> {
    let records = read_jsonl(path)?;
    check_log(path, &records)?;
    Ok(records)
}

/// The single writer of a snapshot log. Holds an exclusive advisory lock on
/// the log file for its lifetime.
pub struct InventoryStore {
    writer: JsonlWriter,
    records: Vec<SnapshotRecord>,
}

impl InventoryStore {
    /// Open or create the log, blocking until the writer lock is free.
    pub fn open(path: &Path) -> Result<Self, InventoryError> {
        let (writer, records) = JsonlWriter::open(path)?;
        check_log(path, &records)?;
        Ok(Self { writer, records })
    }

    pub fn path(&self) -> &Path {
        self.writer.path()
    }

    pub fn append_snapshot(&mut self, snapshot: InventorySnapshot) -> Result<&SnapshotRecord, InventoryError> {
        if let Some(last) = self.records.last() {
            if snapshot.timestamp <= last.snapshot.timestamp {
                return Err(InventoryError::NonMonotonic {
                    previous: last.snapshot.timestamp,
                    attempted: snapshot.timestamp,
                });
            }
        }
        let record = SnapshotRecord {
            seq: self.records.last().map_or(1, |r| r.seq + 1),
            snapshot,
        };
        self.writer.append(&record)?;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn current_counts(&self, tracking: &TrackingList) -> CurrentCounts {
        replay(&self.records, tracking)
    }

    /// Up to `last_n` most recent snapshots, oldest first.
    pub fn history(&self, last_n: usize) -> &[SnapshotRecord] {
        &self.records[self.records.len().saturating_sub(last_n)..]
    }

    pub fn records(&self) -> &[SnapshotRecord] {
        &self.records
    }

    pub fn latest_timestamp(&self) -> Option<DateTime<Utc>> {
        self.records.last().map(|r| r.snapshot.timestamp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use std::collections::BTreeSet;

    fn tracking() -> TrackingList {
        TrackingList::new(vec![("banana".to_string(), 6), ("milk".to_string(), 1)]).unwrap()
    }

    fn snap(hour: u32, banana: u32) -> InventorySnapshot {
        InventorySnapshot {
            timestamp: Utc.with_ymd_and_hms(2024, 3, 4, hour, 0, 0).unwrap(),
            counts: BTreeMap::from([("banana".into(), banana), ("milk".into(), 1)]),
            degraded_cameras: BTreeSet::new(),
            source_frames: Vec::new(),
        }
    }

    #[test]
    fn read_your_write_and_latest_wins() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = InventoryStore::open(&dir.path().join("inv.jsonl")).unwrap();
        let empty = store.current_counts(&tracking());
        assert!(empty.no_observations);
        assert_eq!(empty.counts, BTreeMap::from([("banana".into(), 0), ("milk".into(), 0)]));

        store.append_snapshot(snap(8, 5)).unwrap();
        assert_eq!(store.current_counts(&tracking()).counts, snap(8, 5).counts);
        let rec = store.append_snapshot(snap(9, 2)).unwrap();
        assert_eq!(rec.seq, 2);
        let now = store.current_counts(&tracking());
        assert!(!now.no_observations);
        assert_eq!(now.counts["banana"], 2);
    }

    #[test]
    fn earlier_timestamp_is_rejected_and_store_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.jsonl");
        let mut store = InventoryStore::open(&path).unwrap();
        store.append_snapshot(snap(9, 5)).unwrap();
        let before = std::fs::read(&path).unwrap();
        for h in [8, 9] {
            assert!(matches!(store.append_snapshot(snap(h, 1)), Err(InventoryError::NonMonotonic { .. })));
        }
        assert_eq!(std::fs::read(&path).unwrap(), before);
        assert_eq!(store.records().len(), 1);
    }

    #[test]
    fn reopen_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.jsonl");
        let (records, counts) = {
            let mut store = InventoryStore::open(&path).unwrap();
            for (h, b) in [(8, 6), (12, 3), (18, 2)] {
                store.append_snapshot(snap(h, b)).unwrap();
            }
            (store.records().to_vec(), store.current_counts(&tracking()))
        };
        let store = InventoryStore::open(&path).unwrap();
        assert_eq!(store.records(), &records[..]);
        assert_eq!(store.current_counts(&tracking()), counts);
        assert_eq!(read_snapshots(&path).unwrap(), records);
        assert_eq!(replay(&read_snapshots(&path).unwrap(), &tracking()), counts);
    }

    #[test]
    fn history_windows() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = InventoryStore::open(&dir.path().join("inv.jsonl")).unwrap();
        assert!(store.history(3).is_empty());
        for h in 1..=5 {
            store.append_snapshot(snap(h, h)).unwrap();
        }
        let last2: Vec<u64> = store.history(2).iter().map(|r| r.seq).collect();
        assert_eq!(last2, vec![4, 5]);
        assert_eq!(store.history(50).len(), 5);
    }

    #[test]
    fn torn_tail_is_discarded_and_prior_records_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.jsonl");
        {
            let mut store = InventoryStore::open(&path).unwrap();
            store.append_snapshot(snap(8, 6)).unwrap();
            store.append_snapshot(snap(9, 5)).unwrap();
        }
        let intact = std::fs::read(&path).unwrap();
        let mut torn = intact.clone();
        let line = serde_json::to_vec(&SnapshotRecord { seq: 3, snapshot: snap(10, 4) }).unwrap();
        torn.extend_from_slice(&line[..line.len() / 2]);
        std::fs::write(&path, &torn).unwrap();

        assert_eq!(read_snapshots(&path).unwrap().len(), 2);
        let mut store = InventoryStore::open(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), intact);
        store.append_snapshot(snap(10, 4)).unwrap();
        drop(store);
        assert_eq!(read_snapshots(&path).unwrap().len(), 3);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.jsonl");
        {
            let mut store = InventoryStore::open(&path).unwrap();
            store.append_snapshot(snap(8, 6)).unwrap();
        }
        let mut bytes = b"{garbage}\n".to_vec();
        bytes.extend(std::fs::read(&path).unwrap());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(InventoryStore::open(&path), Err(InventoryError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn record_shape() {
        let rec = SnapshotRecord { seq: 1, snapshot: snap(8, 6) };
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"seq":1,"timestamp":"2024-03-04T08:00:00Z","counts":{"banana":6,"milk":1},"degraded_cameras":[],"source_frames":[]}"#
        );
    }
}
