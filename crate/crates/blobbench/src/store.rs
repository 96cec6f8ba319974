//! Common vocabulary shared by all three backends: object identity, physical
//! placement, per-store statistics, and the `BlobStore` trait the bench
//! driver programs against.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;

use crate::error::Result;

/// Identity of a stored object. Rendered as 16 hex digits everywhere a stable
/// external name is needed (file names, CSV rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u64);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl std::str::FromStr for ObjectId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(ObjectId)
    }
}

/// A half-open byte range `[offset, offset + len)` in the data region of a
/// volume image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub offset: u64,
    pub len: u64,
}

impl Extent {
    pub fn end(&self) -> u64 {
        self.offset + self.len
    }
}

/// Where an object's bytes physically live.
///
/// Extent placements carry exact payload ranges (the final extent is trimmed
/// to the payload, cluster rounding is tracked by the allocator). Page
/// placements list page indexes in chain order; each page holds
/// `page_bytes - header_bytes` payload bytes except the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    Extents(Vec<Extent>),
    Pages(Vec<u64>),
}

impl Placement {
    /// Number of maximal physically contiguous runs.
    ///
    /// For extents the list is kept merged by construction, but we recount
    /// defensively. For pages, consecutive chain positions on consecutive
    /// page indexes count as one run.
    pub fn fragment_count(&self) -> u64 {
        match self {
            Placement::Extents(v) => {
                if v.is_empty() {
                    return 0;
                }
                let mut frags = 1;
                for w in v.windows(2) {
                    if w[0].end() != w[1].offset {
                        frags += 1;
                    }
                }
                frags
            }
            Placement::Pages(v) => {
                if v.is_empty() {
                    return 0;
                }
                let mut frags = 1;
                for w in v.windows(2) {
                    if w[0] + 1 != w[1] {
                        frags += 1;
                    }
                }
                frags
            }
        }
    }
}

/// One live object as the store tracks it.
#[derive(Debug, Clone)]
pub struct BlobRecord {
    pub id: ObjectId,
    pub size: u64,
    /// Bumped on every overwrite; used to name temp files and to match
    /// log records to the chain they allocate or free.
    pub generation: u64,
    pub placement: Placement,
}

/// Monotonic counters a store accumulates over its lifetime.
///
/// `bytes_written` counts the write path at device granularity: payload bytes
/// for the filesystem and extent backends, whole pages for the page backend.
/// Log traffic is tracked separately in `wal_bytes` so bulk-logged behavior
/// (metadata-only logging) is directly observable.
#[derive(Debug, Clone, Copy, Default)]
pub struct StoreStats {
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub allocator_requests: u64,
    /// Current rounding waste across live objects (cluster slack or final-page
    /// slack), not cumulative.
    pub internal_frag_bytes: u64,
    pub wal_bytes: u64,
    pub wal_truncations: u64,
    pub checkpoints: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Fs,
    Extent,
    Page,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Fs => "fs",
            BackendKind::Extent => "extent",
            BackendKind::Page => "page",
        })
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fs" => Ok(BackendKind::Fs),
            "extent" => Ok(BackendKind::Extent),
            "page" => Ok(BackendKind::Page),
            other => Err(format!("unknown backend {other:?} (expected fs, extent, or page)")),
        }
    }
}

/// The write/read/delete surface the bench driver uses.
///
/// A store instance is single-writer. Reads of the underlying image (scans,
/// audits) may happen between operations; nothing here is `Sync`.
pub trait BlobStore {
    /// Store `payload` under `id`, replacing any existing object with
    /// safe-write semantics: the old version remains readable until the new
    /// one is complete, and a crash anywhere leaves old or new, never a mix.
    /// The payload is consumed through `buffer_bytes`-sized chunks; the store
    /// never learns the total size up front.
    fn put(&mut self, id: ObjectId, payload: &mut dyn Read, buffer_bytes: usize) -> Result<BlobRecord>;

    /// Read back the full payload.
    fn get(&mut self, id: ObjectId) -> Result<Vec<u8>>;

    /// Remove an object, returning its payload size.
    fn delete(&mut self, id: ObjectId) -> Result<u64>;

    fn contains(&self, id: ObjectId) -> bool;

    fn size_of(&self, id: ObjectId) -> Option<u64>;

    fn live_ids(&self) -> Vec<ObjectId>;

    fn stats(&self) -> StoreStats;

    /// Free space currently available for new allocations, in bytes.
    /// (Unbounded for the filesystem backend, which reports `u64::MAX`.)
    fn free_bytes(&self) -> u64;

    /// Physical fragment count per live object, from the store's own
    /// placement records. The filesystem backend reports 1 per object (real
    /// extent maps are outside the simulation's scope; documented caveat).
    fn ground_truth_fragments(&self) -> BTreeMap<ObjectId, u64>;

    fn kind(&self) -> BackendKind;
}

pub(crate) fn round_up(n: u64, step: u64) -> u64 {
    debug_assert!(step > 0);
    n.div_ceil(step) * step
}
