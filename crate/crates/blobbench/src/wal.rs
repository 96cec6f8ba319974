//! Bulk-logged write-ahead log for the page backend.
//!
//! Records carry page-allocation metadata and commit points only — never
//! payload bytes; blob content is written to the data region exactly once.
//! The log lives outside the scanned image (separate file, or a byte vector
//! for in-memory stores).
//!
//! Wire format, little-endian:
//!
//! ```text
//! [body_len u32][crc32 u32 over body][body]
//! body: lsn u64, kind u8, then per kind:
//!   1 AllocPages  id u64, generation u64, run_count u32, (first,count u64)*
//!   2 FreePages   id u64, generation u64, run_count u32, (first,count u64)*
//!   3 CommitBlob  id u64, generation u64, size u64, run_count u32, runs
//!   4 Checkpoint  (no fields)
//! ```
//!
//! LSNs are strictly increasing. Decoding stops at the first truncated or
//! CRC-invalid record: a torn tail is cut off, everything before it stands.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::ObjectId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WalRecord {
    AllocPages { id: ObjectId, generation: u64, runs: Vec<(u64, u64)> },
    FreePages { id: ObjectId, generation: u64, runs: Vec<(u64, u64)> },
    CommitBlob { id: ObjectId, generation: u64, size: u64, runs: Vec<(u64, u64)> },
    Checkpoint,
}

impl WalRecord {
    fn encode_body(&self, lsn: u64) -> Vec<u8> {
        let mut b = Vec::with_capacity(64);
        b.extend_from_slice(&lsn.to_le_bytes());
        let put_runs = |b: &mut Vec<u8>, runs: &[(u64, u64)]| {
            b.extend_from_slice(&(runs.len() as u32).to_le_bytes());
            for &(first, count) in runs {
                b.extend_from_slice(&first.to_le_bytes());
                b.extend_from_slice(&count.to_le_bytes());
            }
        };
        match self {
            WalRecord::AllocPages { id, generation, runs } => {
                b.push(1);
                b.extend_from_slice(&id.0.to_le_bytes());
                b.extend_from_slice(&generation.to_le_bytes());
                put_runs(&mut b, runs);
            }
            WalRecord::FreePages { id, generation, runs } => {
                b.push(2);
                b.extend_from_slice(&id.0.to_le_bytes());
                b.extend_from_slice(&generation.to_le_bytes());
                put_runs(&mut b, runs);
            }
            WalRecord::CommitBlob { id, generation, size, runs } => {
                b.push(3);
                b.extend_from_slice(&id.0.to_le_bytes());
                b.extend_from_slice(&generation.to_le_bytes());
                b.extend_from_slice(&size.to_le_bytes());
                put_runs(&mut b, runs);
            }
            WalRecord::Checkpoint => b.push(4),
        }
        b
    }

    pub fn encode(&self, lsn: u64) -> Vec<u8> {
        let body = self.encode_body(lsn);
        let mut out = Vec::with_capacity(body.len() + 8);
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }
}

fn decode_body(body: &[u8]) -> Option<(u64, WalRecord)> {
    let mut pos = 0usize;
    let take_u64 = |pos: &mut usize| -> Option<u64> {
        let end = *pos + 8;
        let v = u64::from_le_bytes(body.get(*pos..end)?.try_into().ok()?);
        *pos = end;
        Some(v)
    };
    let take_u32 = |pos: &mut usize| -> Option<u32> {
        let end = *pos + 4;
        let v = u32::from_le_bytes(body.get(*pos..end)?.try_into().ok()?);
        *pos = end;
        Some(v)
    };
    let lsn = take_u64(&mut pos)?;
    let kind = *body.get(pos)?;
    pos += 1;
    let take_runs = |pos: &mut usize| -> Option<Vec<(u64, u64)>> {
        let n = take_u32(pos)?;
        let mut runs = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let first = take_u64(pos)?;
            let count = take_u64(pos)?;
            runs.push((first, count));
        }
        Some(runs)
    };
    let rec = match kind {
        1 => {
            let id = ObjectId(take_u64(&mut pos)?);
            let generation = take_u64(&mut pos)?;
            WalRecord::AllocPages { id, generation, runs: take_runs(&mut pos)? }
        }
        2 => {
            let id = ObjectId(take_u64(&mut pos)?);
            let generation = take_u64(&mut pos)?;
            WalRecord::FreePages { id, generation, runs: take_runs(&mut pos)? }
        }
        3 => {
            let id = ObjectId(take_u64(&mut pos)?);
            let generation = take_u64(&mut pos)?;
            let size = take_u64(&mut pos)?;
            WalRecord::CommitBlob { id, generation, size, runs: take_runs(&mut pos)? }
        }
        4 => WalRecord::Checkpoint,
        _ => return None,
    };
    (pos == body.len()).then_some((lsn, rec))
}

/// Decode every complete, CRC-valid record. Returns the records and whether
/// the byte stream ended cleanly (no torn tail).
pub fn decode_all(bytes: &[u8]) -> Result<(Vec<(u64, WalRecord)>, bool)> {
    let mut out = Vec::new();
    let mut pos = 0usize;
    let mut last_lsn = 0u64;
    while pos < bytes.len() {
        let Some(head) = bytes.get(pos..pos + 8) else {
            return Ok((out, false));
        };
        let body_len = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(head[4..8].try_into().unwrap());
        let Some(body) = bytes.get(pos + 8..pos + 8 + body_len) else {
            return Ok((out, false));
        };
        if crc32fast::hash(body) != crc {
            return Ok((out, false));
        }
        let Some((lsn, rec)) = decode_body(body) else {
            return Ok((out, false));
        };
        if lsn <= last_lsn && !out.is_empty() {
            return Err(Error::CorruptWal(format!(
                "LSN {lsn} not increasing (after {last_lsn})"
            )));
        }
        last_lsn = lsn;
        out.push((lsn, rec));
        pos += 8 + body_len;
    }
    Ok((out, true))
}

enum WalStorage {
    Memory(Vec<u8>),
    File(File),
}

/// Append-only log handle. `next_lsn` continues from whatever the storage
/// already holds.
pub struct Wal {
    storage: WalStorage,
    next_lsn: u64,
    appended_bytes: u64,
    truncations: u64,
}

impl Wal {
    pub fn new_memory() -> Self {
        Wal { storage: WalStorage::Memory(Vec::new()), next_lsn: 1, appended_bytes: 0, truncations: 0 }
    }

    /// Reconstruct a memory-backed log from crash-test wreckage; `next_lsn`
    /// resumes after the last decodable record.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let (records, clean) = decode_all(&bytes)?;
        let next_lsn = records.last().map_or(1, |(lsn, _)| lsn + 1);
        let mut bytes = bytes;
        if !clean {
            // Drop the torn tail permanently.
            let valid_len = records_byte_len(&bytes, records.len());
            bytes.truncate(valid_len);
        }
        Ok(Wal { storage: WalStorage::Memory(bytes), next_lsn, appended_bytes: 0, truncations: 0 })
    }

    pub fn create_file(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        Ok(Wal {
            storage: WalStorage::File(f),
            next_lsn: 1,
            appended_bytes: 0,
            truncations: 0,
        })
    }

    pub fn open_file(path: &Path) -> Result<Self> {
        let mut f = OpenOptions::new().read(true).write(true).create(true).open(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        let (records, clean) = decode_all(&bytes)?;
        let next_lsn = records.last().map_or(1, |(lsn, _)| lsn + 1);
        if !clean {
            let valid_len = records_byte_len(&bytes, records.len());
            f.set_len(valid_len as u64)?;
            f.seek(SeekFrom::End(0))?;
        }
        Ok(Wal {
            storage: WalStorage::File(f),
            next_lsn,
            appended_bytes: 0,
            truncations: 0,
        })
    }

    pub fn append(&mut self, rec: &WalRecord) -> Result<u64> {
        let lsn = self.next_lsn;
        let encoded = rec.encode(lsn);
        self.write_raw(&encoded)?;
        self.next_lsn = lsn + 1;
        self.appended_bytes += encoded.len() as u64;
        Ok(lsn)
    }

    /// Crash-test hook: append only the first `keep` bytes of the record's
    /// encoding — a torn write at the log tail.
    pub fn append_torn(&mut self, rec: &WalRecord, keep: usize) -> Result<()> {
        let encoded = rec.encode(self.next_lsn);
        let keep = keep.min(encoded.len().saturating_sub(1)).max(1);
        self.write_raw(&encoded[..keep])?;
        Ok(())
    }

    fn write_raw(&mut self, bytes: &[u8]) -> Result<()> {
        match &mut self.storage {
            WalStorage::Memory(v) => {
                v.extend_from_slice(bytes);
                Ok(())
            }
            WalStorage::File(f) => {
                f.seek(SeekFrom::End(0))?;
                f.write_all(bytes)?;
                Ok(())
            }
        }
    }

    pub fn flush(&mut self) -> Result<()> {
        if let WalStorage::File(f) = &mut self.storage {
            f.sync_all()?;
        }
        Ok(())
    }

    /// Discard all records (used right after a checkpoint makes them
    /// redundant).
    pub fn truncate(&mut self) -> Result<()> {
        match &mut self.storage {
            WalStorage::Memory(v) => v.clear(),
            WalStorage::File(f) => {
                f.set_len(0)?;
                f.seek(SeekFrom::Start(0))?;
                f.sync_all()?;
            }
        }
        self.truncations += 1;
        Ok(())
    }

    pub fn len_bytes(&self) -> Result<u64> {
        Ok(match &self.storage {
            WalStorage::Memory(v) => v.len() as u64,
            WalStorage::File(f) => f.metadata()?.len(),
        })
    }

    pub fn appended_bytes(&self) -> u64 {
        self.appended_bytes
    }

    pub fn truncations(&self) -> u64 {
        self.truncations
    }

    pub fn next_lsn(&self) -> u64 {
        self.next_lsn
    }

    /// Full current contents, as a crashed process would leave them.
    pub fn snapshot_bytes(&mut self) -> Result<Vec<u8>> {
        match &mut self.storage {
            WalStorage::Memory(v) => Ok(v.clone()),
            WalStorage::File(f) => {
                f.seek(SeekFrom::Start(0))?;
                let mut out = Vec::new();
                f.read_to_end(&mut out)?;
                Ok(out)
            }
        }
    }
}

/// Byte length of the first `count` records of `bytes` (all known valid).
fn records_byte_len(bytes: &[u8], count: usize) -> usize {
    let mut pos = 0usize;
    for _ in 0..count {
        let body_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 8 + body_len;
    }
    pos
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<WalRecord> {
        vec![
            WalRecord::AllocPages { id: ObjectId(1), generation: 1, runs: vec![(0, 33)] },
            WalRecord::CommitBlob { id: ObjectId(1), generation: 1, size: 262144, runs: vec![(0, 33)] },
            WalRecord::FreePages { id: ObjectId(1), generation: 0, runs: vec![(40, 2), (50, 1)] },
            WalRecord::Checkpoint,
        ]
    }

    #[test]
    fn roundtrip_memory() {
        let mut wal = Wal::new_memory();
        for r in sample_records() {
            wal.append(&r).unwrap();
        }
        let bytes = wal.snapshot_bytes().unwrap();
        let (records, clean) = decode_all(&bytes).unwrap();
        assert!(clean);
        assert_eq!(records.len(), 4);
        assert_eq!(records.iter().map(|(l, _)| *l).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(records[1].1, sample_records()[1]);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let mut wal = Wal::new_memory();
        wal.append(&sample_records()[0]).unwrap();
        wal.append_torn(&sample_records()[1], 10).unwrap();
        let bytes = wal.snapshot_bytes().unwrap();
        let (records, clean) = decode_all(&bytes).unwrap();
        assert!(!clean);
        assert_eq!(records.len(), 1);
        // Reconstructing from the wreckage resumes after the last good LSN.
        let mut resumed = Wal::from_bytes(bytes).unwrap();
        assert_eq!(resumed.next_lsn(), 2);
        resumed.append(&sample_records()[2]).unwrap();
        let (records, clean) = decode_all(&resumed.snapshot_bytes().unwrap()).unwrap();
        assert!(clean);
        assert_eq!(records.len(), 2);
    }

    #[test]
    fn corrupt_middle_truncates_rest() {
        let mut wal = Wal::new_memory();
        for r in sample_records() {
            wal.append(&r).unwrap();
        }
        let mut bytes = wal.snapshot_bytes().unwrap();
        // Flip a byte in the second record's body.
        let first_len = 8 + u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        bytes[first_len + 12] ^= 0x40;
        let (records, clean) = decode_all(&bytes).unwrap();
        assert!(!clean);
        assert_eq!(records.len(), 1);
    }

    #[test]
    fn file_backed_log_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.wal");
        {
            let mut wal = Wal::create_file(&path).unwrap();
            wal.append(&sample_records()[0]).unwrap();
            wal.append(&sample_records()[1]).unwrap();
            wal.flush().unwrap();
        }
        let mut wal = Wal::open_file(&path).unwrap();
        assert_eq!(wal.next_lsn(), 3);
        let (records, clean) = decode_all(&wal.snapshot_bytes().unwrap()).unwrap();
        assert!(clean);
        assert_eq!(records.len(), 2);
        wal.truncate().unwrap();
        assert_eq!(wal.len_bytes().unwrap(), 0);
        assert_eq!(wal.truncations(), 1);
        // LSNs keep rising across truncation.
        assert_eq!(wal.append(&WalRecord::Checkpoint).unwrap(), 3);
    }

    #[test]
    fn no_payload_bytes_in_records() {
        // The encoding of a commit for a 10MB blob stays tiny: metadata only.
        let rec = WalRecord::CommitBlob {
            id: ObjectId(123),
            generation: 7,
            size: 10 * 1024 * 1024,
            runs: vec![(100, 1296)],
        };
        assert!(rec.encode(1).len() < 64);
    }
}
