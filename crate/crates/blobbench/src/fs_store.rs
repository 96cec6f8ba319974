//! Real-filesystem backend: one file per object in a flat directory, every
//! update going through the safe-write protocol — create a temp file, append
//! the payload in buffered chunks, flush, atomically rename over the
//! permanent name. The rename is the commit point, so a reader sees either
//! the complete old payload or the complete new one, never a mix.
//!
//! Crash injection uses named cut points inside `put` rather than real power
//! cuts; `recover_sweep` then plays the role of the post-crash cleanup pass
//! that removes orphaned temp files.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::extent_store::read_full;
use crate::store::{BackendKind, BlobRecord, BlobStore, ObjectId, Placement, StoreStats};

pub const BLOB_SUFFIX: &str = ".blob";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FsyncPolicy {
    /// Flush file contents to stable storage before the rename, and flush the
    /// directory after it (where the platform supports directory fsync).
    #[default]
    FlushBeforeRename,
    /// Skip both flushes. Kept to demonstrate why they matter: after a real
    /// power cut the rename may be durable while the data is not.
    NoFlush,
}

/// Named crash points inside the safe-write sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsCut {
    /// Temp file created, nothing written.
    AfterCreate,
    /// `chunks` buffered appends have landed in the temp file.
    AfterWrite { chunks: u64 },
    /// Payload complete and flushed; rename not issued.
    AfterFlush,
    /// Renamed over the permanent name: the new payload is committed.
    AfterRename,
}

impl FsCut {
    pub fn name(&self) -> &'static str {
        match self {
            FsCut::AfterCreate => "after-create",
            FsCut::AfterWrite { .. } => "after-write",
            FsCut::AfterFlush => "after-flush",
            FsCut::AfterRename => "after-rename",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FsConfig {
    pub root: PathBuf,
    pub fsync_policy: FsyncPolicy,
}

#[derive(Debug, Clone, Copy)]
struct FsEntry {
    size: u64,
    generation: u64,
}

pub struct FsStore {
    cfg: FsConfig,
    table: BTreeMap<ObjectId, FsEntry>,
    stats: StoreStats,
    armed: Option<FsCut>,
}

fn blob_name(id: ObjectId) -> String {
    format!("{id}{BLOB_SUFFIX}")
}

fn temp_name(id: ObjectId, generation: u64) -> String {
    format!("{id}{BLOB_SUFFIX}.tmp-{generation}")
}

fn is_temp(name: &str) -> bool {
    name.contains(".tmp-")
}

fn parse_blob_name(name: &str) -> Option<ObjectId> {
    let stem = name.strip_suffix(BLOB_SUFFIX)?;
    if stem.len() != 16 {
        return None;
    }
    ObjectId::from_str(stem).ok()
}

fn fsync_dir(dir: &Path) -> Result<()> {
    // Directory fsync is a unix notion; elsewhere the rename itself is the
    // best this backend can do.
    #[cfg(unix)]
    {
        File::open(dir)?.sync_all()?;
    }
    #[cfg(not(unix))]
    let _ = dir;
    Ok(())
}

impl FsStore {
    /// Open (or adopt) `root` as a store directory; existing `.blob` files
    /// become the live table.
    pub fn open(cfg: FsConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.root)?;
        let mut table = BTreeMap::new();
        for entry in fs::read_dir(&cfg.root)? {
            let entry = entry?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if is_temp(&name) {
                continue;
            }
            if let Some(id) = parse_blob_name(&name) {
                let size = entry.metadata()?.len();
                table.insert(id, FsEntry { size, generation: 1 });
            }
        }
        Ok(FsStore { cfg, table, stats: StoreStats::default(), armed: None })
    }

    /// Remove every temp-suffixed file under `root`, completing the
    /// safe-write protocol after a dirty shutdown. Committed files are
    /// untouched. Idempotent.
    pub fn recover_sweep(root: &Path) -> Result<u64> {
        let mut removed = 0;
        for entry in fs::read_dir(root)? {
            let entry = entry?;
            if is_temp(&entry.file_name().to_string_lossy()) {
                fs::remove_file(entry.path())?;
                removed += 1;
            }
        }
        if removed > 0 {
            fsync_dir(root)?;
        }
        Ok(removed)
    }

    pub fn root(&self) -> &Path {
        &self.cfg.root
    }

    pub fn blob_path(&self, id: ObjectId) -> PathBuf {
        self.cfg.root.join(blob_name(id))
    }

    /// Arm a one-shot crash during the next `put`.
    pub fn arm_crash(&mut self, cut: FsCut) {
        self.armed = Some(cut);
    }

    /// Best-effort eviction of an object's cached file data, so the next
    /// read is closer to a cold one. No-op where unsupported.
    pub fn drop_cache(&self, id: ObjectId) -> Result<()> {
        #[cfg(target_os = "linux")]
        {
            use std::os::unix::io::AsRawFd;
            if let Ok(f) = File::open(self.blob_path(id)) {
                unsafe {
                    libc::posix_fadvise(f.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED);
                }
            }
        }
        #[cfg(not(target_os = "linux"))]
        let _ = id;
        Ok(())
    }

    fn crash_now(&mut self, cut: FsCut) -> Error {
        self.armed = None;
        Error::InjectedCrash(cut.name().into())
    }
}

impl BlobStore for FsStore {
    fn put(&mut self, id: ObjectId, payload: &mut dyn Read, buffer_bytes: usize) -> Result<BlobRecord> {
        if buffer_bytes == 0 {
            return Err(Error::Config("write buffer must be positive".into()));
        }
        let armed = self.armed;
        let generation = self.table.get(&id).map_or(1, |e| e.generation + 1);
        let tmp = self.cfg.root.join(temp_name(id, generation));
        let dst = self.blob_path(id);

        // Step 1: create the temp file.
        let mut f = OpenOptions::new().write(true).create_new(true).open(&tmp)?;
        if armed == Some(FsCut::AfterCreate) {
            return Err(self.crash_now(FsCut::AfterCreate));
        }

        // Step 2: append in buffer-sized chunks.
        let mut chunk = vec![0u8; buffer_bytes];
        let mut written = 0u64;
        let mut chunks = 0u64;
        loop {
            let n = read_full(payload, &mut chunk)?;
            if n == 0 {
                break;
            }
            f.write_all(&chunk[..n])?;
            written += n as u64;
            chunks += 1;
            self.stats.allocator_requests += 1; // append requests reaching the fs
            if let Some(FsCut::AfterWrite { chunks: k }) = armed {
                if chunks == k {
                    return Err(self.crash_now(FsCut::AfterWrite { chunks: k }));
                }
            }
        }
        if written == 0 {
            drop(f);
            fs::remove_file(&tmp)?;
            return Err(Error::Config("empty payload".into()));
        }
        self.stats.bytes_written += written;

        // Step 3: flush to stable storage.
        if self.cfg.fsync_policy == FsyncPolicy::FlushBeforeRename {
            f.sync_all()?;
        }
        drop(f);
        if armed == Some(FsCut::AfterFlush) {
            return Err(self.crash_now(FsCut::AfterFlush));
        }

        // Step 4: atomic replace, then pin the directory entry down.
        fs::rename(&tmp, &dst)?;
        if self.cfg.fsync_policy == FsyncPolicy::FlushBeforeRename {
            fsync_dir(&self.cfg.root)?;
        }
        self.table.insert(id, FsEntry { size: written, generation });
        if armed == Some(FsCut::AfterRename) {
            return Err(self.crash_now(FsCut::AfterRename));
        }
        Ok(BlobRecord { id, size: written, generation, placement: Placement::Extents(Vec::new()) })
    }

    fn get(&mut self, id: ObjectId) -> Result<Vec<u8>> {
        if !self.table.contains_key(&id) {
            return Err(Error::NotFound(id));
        }
        let mut buf = Vec::new();
        File::open(self.blob_path(id))?.read_to_end(&mut buf)?;
        self.stats.bytes_read += buf.len() as u64;
        Ok(buf)
    }

    fn delete(&mut self, id: ObjectId) -> Result<u64> {
        let entry = self.table.remove(&id).ok_or(Error::NotFound(id))?;
        fs::remove_file(self.blob_path(id))?;
        if self.cfg.fsync_policy == FsyncPolicy::FlushBeforeRename {
            fsync_dir(&self.cfg.root)?;
        }
        Ok(entry.size)
    }

    fn contains(&self, id: ObjectId) -> bool {
        self.table.contains_key(&id)
    }

    fn size_of(&self, id: ObjectId) -> Option<u64> {
        self.table.get(&id).map(|e| e.size)
    }

    fn live_ids(&self) -> Vec<ObjectId> {
        self.table.keys().copied().collect()
    }

    fn stats(&self) -> StoreStats {
        self.stats
    }

    fn free_bytes(&self) -> u64 {
        #[cfg(unix)]
        {
            use std::os::unix::ffi::OsStrExt;
            let mut c_path = self.cfg.root.as_os_str().as_bytes().to_vec();
            c_path.push(0);
            let mut vfs: libc::statvfs = unsafe { std::mem::zeroed() };
            let rc = unsafe { libc::statvfs(c_path.as_ptr() as *const libc::c_char, &mut vfs) };
            if rc == 0 {
                return vfs.f_bavail as u64 * vfs.f_frsize as u64;
            }
        }
        u64::MAX
    }

    fn ground_truth_fragments(&self) -> BTreeMap<ObjectId, u64> {
        // Real extent maps are not observable portably; each file counts as
        // one fragment. Fragmentation studies use the simulated backends.
        self.table.keys().map(|&id| (id, 1)).collect()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Fs
    }
}
