//! Simulated database-like page backend: blobs stored out-of-row as chains
//! of fixed-size pages over a volume image, with a bulk-logged write-ahead
//! log carrying metadata only.
//!
//! Safe-write shape of every overwrite: allocate and write the new chain
//! (pages logged ahead of data, content never logged), append the commit
//! record — the visibility point — then free the old chain. Recovery replays
//! the log on top of the last checkpointed blob table; chains without a
//! durable commit roll back to free.
//!
//! Allocation policy is first-available: each request takes the lowest-
//! indexed free pages. Freed pages are reusable immediately after the
//! operation that freed them commits (modeled choice; the alternative —
//! NTFS-style deferred reuse — belongs to the extent backend).
//!
//! Each page starts with a `header_bytes` header (first 24 bytes used):
//! magic "BBPGHDR1", blob id (u64), chain position (u32), payload length
//! (u32), zero-padded. Payload capacity is `page_bytes - header_bytes`,
//! which must stay 32-byte aligned so the 1 KiB payload markers never
//! straddle a page boundary.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::extent_store::read_full;
use crate::meta;
use crate::store::{BackendKind, BlobRecord, BlobStore, ObjectId, Placement, StoreStats};
use crate::volume::VolumeImage;
use crate::wal::{decode_all, Wal, WalRecord};

pub const PAGE_MAGIC: [u8; 8] = *b"BBPGHDR1";
pub const DEFAULT_PAGE_HEADER: u32 = 96;

#[derive(Debug, Clone, Copy)]
pub struct PageConfig {
    pub header_bytes: u32,
}

impl Default for PageConfig {
    fn default() -> Self {
        PageConfig { header_bytes: DEFAULT_PAGE_HEADER }
    }
}

/// Named crash points inside `put`, all relative to the WAL protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageCut {
    /// After the first page-allocation record reaches the log, before any
    /// data page is written.
    AfterFirstAlloc,
    /// After `pages` data pages of the new chain have been written.
    MidData { pages: u64 },
    /// All data pages written, commit record not yet appended.
    AfterData,
    /// The commit record is torn: only `keep` bytes of it reach the log.
    TornCommit { keep: usize },
    /// Commit record durable; old chain not yet freed.
    AfterCommit,
}

impl PageCut {
    pub const NAMES: [&'static str; 5] =
        ["after-first-alloc", "mid-data", "after-data", "torn-commit", "after-commit"];

    pub fn name(&self) -> &'static str {
        match self {
            PageCut::AfterFirstAlloc => "after-first-alloc",
            PageCut::MidData { .. } => "mid-data",
            PageCut::AfterData => "after-data",
            PageCut::TornCommit { .. } => "torn-commit",
            PageCut::AfterCommit => "after-commit",
        }
    }
}

/// Free-page tracking. Membership lives in a bitmap (bit set = free); the
/// allocation ORDER is a recycle queue. A fresh volume queues every page in
/// index order, so sequential loads lay out contiguously; reclaimed pages
/// join the back of the queue in deallocation order and are handed out
/// first-in first-out, the way a free-list allocator recycles space. The
/// allocator makes no attempt to place a chain contiguously — contiguity is
/// whatever the queue happens to deliver.
#[derive(Debug)]
struct PageAllocator {
    words: Vec<u64>, // bit set = free
    free_count: u64,
    queue: std::collections::VecDeque<u64>,
}

impl PageAllocator {
    fn all_free(total: u64) -> Self {
        let nwords = (total as usize).div_ceil(64);
        let mut words = vec![u64::MAX; nwords];
        // Clear bits past the end.
        let tail = total % 64;
        if tail != 0 {
            words[nwords - 1] = (1u64 << tail) - 1;
        }
        PageAllocator { words, free_count: total, queue: (0..total).collect() }
    }

    fn is_free(&self, idx: u64) -> bool {
        self.words[(idx / 64) as usize] & (1 << (idx % 64)) != 0
    }

    /// Hand a reclaimed page back: it joins the back of the recycle queue.
    fn release(&mut self, idx: u64) -> Result<()> {
        if self.is_free(idx) {
            return Err(Error::Invariant(format!("double free of page {idx}")));
        }
        self.words[(idx / 64) as usize] |= 1 << (idx % 64);
        self.free_count += 1;
        self.queue.push_back(idx);
        Ok(())
    }

    fn set_used(&mut self, idx: u64) -> Result<()> {
        if !self.is_free(idx) {
            return Err(Error::Invariant(format!("page {idx} claimed twice")));
        }
        self.words[(idx / 64) as usize] &= !(1 << (idx % 64));
        self.free_count -= 1;
        Ok(())
    }

    /// Take the next `n` pages in recycle order; state untouched on failure.
    fn alloc_next(&mut self, n: u64) -> Result<Vec<u64>> {
        if self.free_count < n {
            return Err(Error::VolumeFull { requested: n, free: self.free_count });
        }
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let idx = self.queue.pop_front().expect("queue tracks free_count");
            self.set_used(idx).expect("queued page is free");
            out.push(idx);
        }
        Ok(out)
    }

    /// Undo this operation's allocation: the pages return to the FRONT of
    /// the queue in their original order, restoring the pre-op state.
    fn restore(&mut self, pages: &[u64]) {
        for &p in pages.iter().rev() {
            assert!(!self.is_free(p), "restored page {p} was not allocated");
            self.words[(p / 64) as usize] |= 1 << (p % 64);
            self.free_count += 1;
            self.queue.push_front(p);
        }
    }

    /// Rebuild the queue in index order from the bitmap — the recovery path,
    /// where the original recycle order is unknowable and a deterministic
    /// one is required. (Bits past the volume end are never set.)
    fn reset_queue(&mut self) {
        self.queue = (0..self.words.len() as u64 * 64).filter(|&i| self.is_free(i)).collect();
        debug_assert_eq!(self.queue.len() as u64, self.free_count);
    }
}

pub struct PageStore {
    img: VolumeImage,
    wal: Wal,
    table: BTreeMap<ObjectId, BlobRecord>,
    alloc: PageAllocator,
    // Deallocated chains awaiting cleanup, oldest first. A freed chain is
    // logically gone at commit but its pages stay charged until cleanup
    // releases them, so the allocator cannot instantly recycle the hole an
    // overwrite just made. Cleanup is bounded work: an allocation shortfall
    // dequeues only enough whole chains to cover it.
    ghosts: std::collections::VecDeque<Vec<u64>>,
    ghost_pages: u64,
    cfg: PageConfig,
    stats: StoreStats,
    page_bytes: u64,
    data_pages: u64,
    checkpoint_lsn: u64,
    armed: Option<PageCut>,
}

fn validate_page_cfg(page_bytes: u64, header_bytes: u32) -> Result<u64> {
    let h = header_bytes as u64;
    if h < 24 || h >= page_bytes {
        return Err(Error::Config(format!(
            "page header {h} must be in [24, page size {page_bytes})"
        )));
    }
    let usable = page_bytes - h;
    if usable < 1024 || usable % 32 != 0 {
        return Err(Error::Config(format!(
            "usable page payload {usable} must be >= 1024 and 32-byte aligned \
             (keeps payload markers from straddling pages)"
        )));
    }
    Ok(usable)
}

impl PageStore {
    /// Fresh store over an empty image with an in-memory log (tests, crash
    /// harness).
    pub fn new_memory(img: VolumeImage, cfg: PageConfig) -> Result<Self> {
        Self::new(img, Wal::new_memory(), cfg)
    }

    /// Fresh store with a log file beside the image.
    pub fn create_file_backed(img: VolumeImage, wal_path: &Path, cfg: PageConfig) -> Result<Self> {
        Self::new(img, Wal::create_file(wal_path)?, cfg)
    }

    fn new(mut img: VolumeImage, wal: Wal, cfg: PageConfig) -> Result<Self> {
        let page_bytes = img.geometry().page_bytes as u64;
        validate_page_cfg(page_bytes, cfg.header_bytes)?;
        let data_pages = img.geometry().data_len() / page_bytes;
        // Seed an empty checkpoint so recovery always has a base table.
        meta::write_page_table(&mut img, &BTreeMap::new(), 0)?;
        Ok(PageStore {
            img,
            wal,
            table: BTreeMap::new(),
            alloc: PageAllocator::all_free(data_pages),
            ghosts: Default::default(),
            ghost_pages: 0,
            cfg,
            stats: StoreStats::default(),
            page_bytes,
            data_pages,
            checkpoint_lsn: 0,
            armed: None,
        })
    }

    /// Rebuild a consistent store from an image plus its log, as left by any
    /// crash. Pure function of the two inputs: re-running it yields the same
    /// state.
    pub fn recover(img: VolumeImage, wal: Wal, cfg: PageConfig) -> Result<Self> {
        let page_bytes = img.geometry().page_bytes as u64;
        validate_page_cfg(page_bytes, cfg.header_bytes)?;
        let data_pages = img.geometry().data_len() / page_bytes;
        let (mut table, checkpoint_lsn) = meta::read_page_table(&img)?;
        let mut wal = wal;
        let bytes = wal.snapshot_bytes()?;
        let (records, _clean) = decode_all(&bytes)?;
        for (lsn, rec) in records {
            if lsn <= checkpoint_lsn {
                continue;
            }
            match rec {
                WalRecord::AllocPages { .. } => {
                    // Uncommitted allocations roll back by omission: pages
                    // return to free unless a commit claims them below.
                }
                WalRecord::CommitBlob { id, generation, size, runs } => {
                    let mut pages = Vec::new();
                    for (first, count) in runs {
                        pages.extend(first..first + count);
                    }
                    table.insert(
                        id,
                        BlobRecord { id, size, generation, placement: Placement::Pages(pages) },
                    );
                }
                WalRecord::FreePages { id, generation, .. } => {
                    // Freeing the current generation is a deletion; freeing an
                    // older one is safe-write cleanup of a replaced chain.
                    if table.get(&id).is_some_and(|r| r.generation == generation) {
                        table.remove(&id);
                    }
                }
                WalRecord::Checkpoint => {}
            }
        }
        let mut alloc = PageAllocator::all_free(data_pages);
        let mut stats = StoreStats::default();
        for rec in table.values() {
            let Placement::Pages(pages) = &rec.placement else {
                return Err(Error::CorruptImage("page store table holds extents".into()));
            };
            for &p in pages {
                if p >= data_pages {
                    return Err(Error::CorruptImage(format!("chain page {p} out of range")));
                }
                alloc
                    .set_used(p)
                    .map_err(|_| Error::CorruptImage(format!("page {p} in two chains")))?;
            }
            let usable = page_bytes - cfg.header_bytes as u64;
            stats.internal_frag_bytes += pages.len() as u64 * usable - rec.size;
        }
        alloc.reset_queue();
        Ok(PageStore {
            img,
            wal,
            table,
            alloc,
            // Recovery rederives the free set from the table, which is the
            // cleanup sweep by construction: no ghosts survive a restart.
            ghosts: Default::default(),
            ghost_pages: 0,
            cfg,
            stats,
            page_bytes,
            data_pages,
            checkpoint_lsn,
            armed: None,
        })
    }

    /// Reopen a file-backed store: image plus `<wal_path>` log.
    pub fn open_file_backed(img: VolumeImage, wal_path: &Path, cfg: PageConfig) -> Result<Self> {
        Self::recover(img, Wal::open_file(wal_path)?, cfg)
    }

    pub fn usable_bytes(&self) -> u64 {
        self.page_bytes - self.cfg.header_bytes as u64
    }

    pub fn data_pages(&self) -> u64 {
        self.data_pages
    }

    pub fn free_pages(&self) -> u64 {
        self.alloc.free_count
    }

    pub fn image(&self) -> &VolumeImage {
        &self.img
    }

    pub fn record(&self, id: ObjectId) -> Option<&BlobRecord> {
        self.table.get(&id)
    }

    pub fn checkpoints(&self) -> u64 {
        self.stats.checkpoints
    }

    /// Arm a one-shot crash during the next `put`.
    pub fn arm_crash(&mut self, cut: PageCut) {
        self.armed = Some(cut);
    }

    /// Tear the store down exactly as a process death would leave it,
    /// yielding the image and raw log bytes for recovery.
    pub fn dismantle(mut self) -> Result<(VolumeImage, Vec<u8>)> {
        let bytes = self.wal.snapshot_bytes()?;
        Ok((self.img, bytes))
    }

    /// Return every ghosted chain to the allocator: the full cleanup pass,
    /// run at checkpoint and before maintenance that wants the whole free
    /// map. Deallocation is deferred: a freed chain stays charged against
    /// capacity until cleanup releases it.
    pub fn sweep_ghosts(&mut self) -> Result<()> {
        while let Some(chain) = self.ghosts.pop_front() {
            self.ghost_pages -= chain.len() as u64;
            for p in chain {
                self.alloc.release(p)?;
            }
        }
        Ok(())
    }

    /// Bounded cleanup on allocation shortfall: dequeue the oldest
    /// deallocated chains, whole chains at a time, until at least `want`
    /// pages are free or the queue runs dry.
    fn release_oldest_ghosts(&mut self, want: u64) -> Result<()> {
        while self.alloc.free_count < want {
            let Some(chain) = self.ghosts.pop_front() else { break };
            self.ghost_pages -= chain.len() as u64;
            for p in chain {
                self.alloc.release(p)?;
            }
        }
        Ok(())
    }

    /// Append a checkpoint record, persist the blob table into the image
    /// metadata region, and truncate the log.
    pub fn checkpoint(&mut self) -> Result<()> {
        self.sweep_ghosts()?;
        let lsn = self.wal.append(&WalRecord::Checkpoint)?;
        self.wal.flush()?;
        meta::write_page_table(&mut self.img, &self.table, lsn)?;
        self.img.flush()?;
        self.wal.truncate()?;
        self.checkpoint_lsn = lsn;
        self.stats.checkpoints += 1;
        Ok(())
    }

    /// Flush log and table state without truncating (clean close).
    pub fn close(mut self) -> Result<VolumeImage> {
        self.checkpoint()?;
        Ok(self.img)
    }

    fn page_offset(&self, idx: u64) -> u64 {
        idx * self.page_bytes
    }

    fn write_page(&mut self, idx: u64, id: ObjectId, pos: u32, payload: &[u8]) -> Result<()> {
        debug_assert!(payload.len() as u64 <= self.usable_bytes());
        let mut buf = vec![0u8; self.page_bytes as usize];
        buf[0..8].copy_from_slice(&PAGE_MAGIC);
        buf[8..16].copy_from_slice(&id.0.to_le_bytes());
        buf[16..20].copy_from_slice(&pos.to_le_bytes());
        buf[20..24].copy_from_slice(&(payload.len() as u32).to_le_bytes());
        let h = self.cfg.header_bytes as usize;
        buf[h..h + payload.len()].copy_from_slice(payload);
        self.img.write_data(self.page_offset(idx), &buf)?;
        self.stats.bytes_written += self.page_bytes;
        Ok(())
    }

    fn read_page_payload(&self, idx: u64, id: ObjectId, pos: u32, out: &mut Vec<u8>) -> Result<()> {
        let mut buf = vec![0u8; self.page_bytes as usize];
        self.img.read_data(self.page_offset(idx), &mut buf)?;
        if buf[0..8] != PAGE_MAGIC {
            return Err(Error::CorruptImage(format!("page {idx}: bad page magic")));
        }
        let got_id = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        let got_pos = u32::from_le_bytes(buf[16..20].try_into().unwrap());
        let len = u32::from_le_bytes(buf[20..24].try_into().unwrap()) as usize;
        if got_id != id.0 || got_pos != pos {
            return Err(Error::CorruptImage(format!(
                "page {idx}: header says blob {got_id:016x} pos {got_pos}, chain expects {id} pos {pos}"
            )));
        }
        if len as u64 > self.usable_bytes() {
            return Err(Error::CorruptImage(format!("page {idx}: payload length {len} too large")));
        }
        let h = self.cfg.header_bytes as usize;
        out.extend_from_slice(&buf[h..h + len]);
        Ok(())
    }

    fn rollback_pages(&mut self, pages: &[u64]) {
        self.alloc.restore(pages);
    }

    fn crash_now(&mut self, cut: PageCut) -> Error {
        self.armed = None;
        Error::InjectedCrash(cut.name().into())
    }

    /// Full accounting check: chain-length formula per blob, no page in two
    /// chains, free count reconciles with capacity.
    pub fn audit(&self) -> Result<()> {
        let usable = self.usable_bytes();
        let mut used = std::collections::BTreeSet::new();
        for rec in self.table.values() {
            let Placement::Pages(pages) = &rec.placement else {
                return Err(Error::Invariant("non-page placement".into()));
            };
            if pages.len() as u64 != rec.size.div_ceil(usable) {
                return Err(Error::Invariant(format!(
                    "blob {} chain length {} != ceil({} / {usable})",
                    rec.id,
                    pages.len(),
                    rec.size
                )));
            }
            for &p in pages {
                if p >= self.data_pages || !used.insert(p) {
                    return Err(Error::Invariant(format!("page {p} out of range or shared")));
                }
                if self.alloc.is_free(p) {
                    return Err(Error::Invariant(format!("live page {p} marked free")));
                }
            }
        }
        let mut ghosted = std::collections::BTreeSet::new();
        for &p in self.ghosts.iter().flatten() {
            if p >= self.data_pages || used.contains(&p) || !ghosted.insert(p) {
                return Err(Error::Invariant(format!(
                    "ghost page {p} out of range, still live, or ghosted twice"
                )));
            }
            if self.alloc.is_free(p) {
                return Err(Error::Invariant(format!("ghost page {p} already free")));
            }
        }
        if ghosted.len() as u64 != self.ghost_pages {
            return Err(Error::Invariant(format!(
                "ghost accounting: {} queued != {} counted",
                ghosted.len(),
                self.ghost_pages
            )));
        }
        if used.len() as u64 + ghosted.len() as u64 + self.alloc.free_count != self.data_pages {
            return Err(Error::Invariant(format!(
                "page conservation: {} live + {} ghosted + {} free != {} total",
                used.len(),
                ghosted.len(),
                self.alloc.free_count,
                self.data_pages
            )));
        }
        let queued: std::collections::BTreeSet<u64> = self.alloc.queue.iter().copied().collect();
        if queued.len() != self.alloc.queue.len() || queued.len() as u64 != self.alloc.free_count {
            return Err(Error::Invariant(format!(
                "recycle queue holds {} entries ({} distinct) against {} free pages",
                self.alloc.queue.len(),
                queued.len(),
                self.alloc.free_count
            )));
        }
        if let Some(&p) = queued.iter().find(|&&p| !self.alloc.is_free(p)) {
            return Err(Error::Invariant(format!("queued page {p} is not free")));
        }
        Ok(())
    }

    /// Rewrite every blob, in id order, into a fresh store over `target_img`
    /// — the new-table-copy defragmentation. Refuses when the *source* free
    /// space cannot hold another copy of the largest blob.
    pub fn defragment_by_copy(
        &mut self,
        target_img: VolumeImage,
        target_wal: Wal,
        buffer_bytes: usize,
    ) -> Result<(PageStore, u64)> {
        self.sweep_ghosts()?;
        let largest = self.table.values().map(|r| r.size).max().unwrap_or(0);
        let free_payload = self.free_pages() * self.usable_bytes();
        if free_payload < largest {
            return Err(Error::DefragRefused(format!(
                "free space {free_payload} bytes < largest blob {largest} bytes; \
                 need at least {largest} bytes free to stage a copy"
            )));
        }
        if target_img.geometry().data_len() < self.table.values().map(|r| r.size).sum() {
            return Err(Error::DefragRefused("target region smaller than live data".into()));
        }
        let mut fresh = PageStore::new(target_img, target_wal, self.cfg)?;
        let ids: Vec<ObjectId> = self.table.keys().copied().collect();
        let mut copied = 0u64;
        for id in ids {
            let payload = self.get(id)?;
            fresh.put(id, &mut Cursor::new(payload), buffer_bytes)?;
            copied += 1;
        }
        fresh.checkpoint()?;
        Ok((fresh, copied))
    }
}

impl BlobStore for PageStore {
    fn put(&mut self, id: ObjectId, payload: &mut dyn Read, buffer_bytes: usize) -> Result<BlobRecord> {
        if buffer_bytes == 0 {
            return Err(Error::Config("write buffer must be positive".into()));
        }
        let usable = self.usable_bytes() as usize;
        let old = self.table.get(&id).cloned();
        let generation = old.as_ref().map_or(1, |r| r.generation + 1);
        let armed = self.armed;

        let mut chunk = vec![0u8; buffer_bytes];
        let mut pending = Vec::with_capacity(usable); // partial page payload
        let mut new_pages: Vec<u64> = Vec::new();
        let mut pages_written = 0u64;
        let mut written = 0u64;
        let mut first_alloc = true;
        loop {
            let n = read_full(payload, &mut chunk)?;
            if n == 0 {
                break;
            }
            // Allocate whatever this chunk adds to the chain, logged before
            // any of its data lands.
            let total_after = written + n as u64;
            let needed = total_after.div_ceil(usable as u64);
            if needed > new_pages.len() as u64 {
                let want = needed - new_pages.len() as u64;
                let more = loop {
                    match self.alloc.alloc_next(want) {
                        Ok(m) => break m,
                        Err(Error::VolumeFull { .. }) if !self.ghosts.is_empty() => {
                            // A shortfall activates cleanup, then the request
                            // is retried. This operation's own victim is not
                            // ghosted yet, so the old copy survives a crash
                            // past this point.
                            if let Err(e) = self.release_oldest_ghosts(want) {
                                self.rollback_pages(&new_pages);
                                return Err(e);
                            }
                        }
                        Err(e) => {
                            self.rollback_pages(&new_pages);
                            return Err(e);
                        }
                    }
                };
                self.stats.allocator_requests += 1;
                self.wal.append(&WalRecord::AllocPages {
                    id,
                    generation,
                    runs: meta::pages_to_runs(&more),
                })?;
                new_pages.extend(more);
                if first_alloc {
                    first_alloc = false;
                    if armed == Some(PageCut::AfterFirstAlloc) {
                        return Err(self.crash_now(PageCut::AfterFirstAlloc));
                    }
                }
            }
            // Fill pages; each page is written exactly once, when full.
            let mut off = 0usize;
            while off < n {
                let take = (usable - pending.len()).min(n - off);
                pending.extend_from_slice(&chunk[off..off + take]);
                off += take;
                if pending.len() == usable {
                    let idx = new_pages[pages_written as usize];
                    let payload_page = std::mem::take(&mut pending);
                    self.write_page(idx, id, pages_written as u32, &payload_page)?;
                    pages_written += 1;
                    if let Some(PageCut::MidData { pages }) = armed {
                        if pages_written == pages {
                            return Err(self.crash_now(PageCut::MidData { pages }));
                        }
                    }
                    pending = Vec::with_capacity(usable);
                }
            }
            written += n as u64;
        }
        if written == 0 {
            return Err(Error::Config("empty payload".into()));
        }
        if !pending.is_empty() {
            let idx = new_pages[pages_written as usize];
            let payload_page = std::mem::take(&mut pending);
            self.write_page(idx, id, pages_written as u32, &payload_page)?;
            pages_written += 1;
            if let Some(PageCut::MidData { pages }) = armed {
                if pages_written == pages {
                    return Err(self.crash_now(PageCut::MidData { pages }));
                }
            }
        }
        debug_assert_eq!(pages_written, new_pages.len() as u64);

        if armed == Some(PageCut::AfterData) {
            return Err(self.crash_now(PageCut::AfterData));
        }
        let commit = WalRecord::CommitBlob {
            id,
            generation,
            size: written,
            runs: meta::pages_to_runs(&new_pages),
        };
        if let Some(PageCut::TornCommit { keep }) = armed {
            self.wal.append_torn(&commit, keep)?;
            return Err(self.crash_now(PageCut::TornCommit { keep }));
        }
        self.wal.append(&commit)?;
        self.wal.flush()?;
        if armed == Some(PageCut::AfterCommit) {
            return Err(self.crash_now(PageCut::AfterCommit));
        }

        if let Some(old_rec) = &old {
            let Placement::Pages(old_pages) = &old_rec.placement else {
                unreachable!("page store records hold pages")
            };
            // The old chain is dead but its pages only become allocatable
            // once cleanup reaches it.
            self.ghost_pages += old_pages.len() as u64;
            self.ghosts.push_back(old_pages.clone());
            self.wal.append(&WalRecord::FreePages {
                id,
                generation: old_rec.generation,
                runs: meta::pages_to_runs(old_pages),
            })?;
            self.stats.internal_frag_bytes -=
                old_pages.len() as u64 * self.usable_bytes() - old_rec.size;
        }
        self.stats.internal_frag_bytes += new_pages.len() as u64 * self.usable_bytes() - written;
        let rec = BlobRecord { id, size: written, generation, placement: Placement::Pages(new_pages) };
        self.table.insert(id, rec.clone());
        self.stats.wal_bytes = self.wal.appended_bytes();
        Ok(rec)
    }

    fn get(&mut self, id: ObjectId) -> Result<Vec<u8>> {
        let rec = self.table.get(&id).cloned().ok_or(Error::NotFound(id))?;
        let Placement::Pages(pages) = &rec.placement else {
            unreachable!("page store records hold pages")
        };
        let mut out = Vec::with_capacity(rec.size as usize);
        for (pos, &idx) in pages.iter().enumerate() {
            self.read_page_payload(idx, id, pos as u32, &mut out)?;
        }
        if out.len() as u64 != rec.size {
            return Err(Error::CorruptImage(format!(
                "blob {id}: chain yields {} bytes, table says {}",
                out.len(),
                rec.size
            )));
        }
        self.stats.bytes_read += out.len() as u64;
        Ok(out)
    }

    fn delete(&mut self, id: ObjectId) -> Result<u64> {
        let rec = self.table.remove(&id).ok_or(Error::NotFound(id))?;
        let Placement::Pages(pages) = &rec.placement else {
            unreachable!("page store records hold pages")
        };
        self.ghost_pages += pages.len() as u64;
        self.ghosts.push_back(pages.clone());
        self.wal.append(&WalRecord::FreePages {
            id,
            generation: rec.generation,
            runs: meta::pages_to_runs(pages),
        })?;
        self.wal.flush()?;
        self.stats.internal_frag_bytes -= pages.len() as u64 * self.usable_bytes() - rec.size;
        self.stats.wal_bytes = self.wal.appended_bytes();
        Ok(rec.size)
    }

    fn contains(&self, id: ObjectId) -> bool {
        self.table.contains_key(&id)
    }

    fn size_of(&self, id: ObjectId) -> Option<u64> {
        self.table.get(&id).map(|r| r.size)
    }

    fn live_ids(&self) -> Vec<ObjectId> {
        self.table.keys().copied().collect()
    }

    fn stats(&self) -> StoreStats {
        let mut s = self.stats;
        s.wal_bytes = self.wal.appended_bytes();
        s.wal_truncations = self.wal.truncations();
        s
    }

    fn free_bytes(&self) -> u64 {
        // Ghosted pages count: they are dead space cleanup will reclaim.
        (self.alloc.free_count + self.ghost_pages) * self.usable_bytes()
    }

    fn ground_truth_fragments(&self) -> BTreeMap<ObjectId, u64> {
        self.table
            .iter()
            .map(|(&id, rec)| (id, rec.placement.fragment_count()))
            .collect()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Page
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn mem_store(capacity: u64) -> PageStore {
        let img = VolumeImage::create_in_memory(Geometry::with_capacity(capacity)).unwrap();
        PageStore::new_memory(img, PageConfig::default()).unwrap()
    }

    fn payload(tag: u64, size: u64) -> Vec<u8> {
        crate::marker::make_payload(tag, size, 0).unwrap()
    }

    #[test]
    fn chain_length_formula() {
        let mut s = mem_store(64 << 20);
        // 256KB at 8096 usable → 33 pages; 10MB → 1296 pages.
        let rec = s.put(ObjectId(1), &mut Cursor::new(payload(1, 262144)), 65536).unwrap();
        assert_eq!(rec.placement.fragment_count(), 1);
        let Placement::Pages(p) = &rec.placement else { unreachable!() };
        assert_eq!(p.len(), 33);
        let rec = s.put(ObjectId(2), &mut Cursor::new(payload(2, 10 * 1024 * 1024)), 65536).unwrap();
        let Placement::Pages(p) = &rec.placement else { unreachable!() };
        assert_eq!(p.len(), 1296);
        s.audit().unwrap();
    }

    #[test]
    fn fresh_pages_first_then_recycle_in_deallocation_order() {
        let mut s = mem_store(16 << 20);
        let usable = s.usable_bytes();
        let two_pages = 2 * usable / 1024 * 1024; // 2-page blobs
        for id in 1..=4u64 {
            s.put(ObjectId(id), &mut Cursor::new(payload(id, two_pages)), 65536).unwrap();
        }
        s.delete(ObjectId(2)).unwrap();
        s.sweep_ghosts().unwrap(); // make the hole allocatable
        // Fresh pages are handed out in index order ahead of recycled ones, so
        // the hole at [2, 3] stays open and the next blob extends the tail.
        let rec = s.put(ObjectId(5), &mut Cursor::new(payload(5, two_pages)), 65536).unwrap();
        let Placement::Pages(p) = &rec.placement else { unreachable!() };
        assert_eq!(p, &vec![8, 9]);
        // Consume every remaining fresh page with one blob, leaving only the
        // recycled hole in the queue.
        let fresh_left = s.free_pages() - 2;
        let fill = fresh_left * usable / 1024 * 1024; // still needs fresh_left pages
        s.put(ObjectId(6), &mut Cursor::new(payload(6, fill)), 65536).unwrap();
        assert_eq!(s.free_pages(), 2);
        // Free more chains; reuse must follow deallocation order, not index
        // order: blob 2's pages went back first, then blob 4's, then blob 1's.
        s.delete(ObjectId(4)).unwrap();
        s.delete(ObjectId(1)).unwrap();
        s.sweep_ghosts().unwrap();
        for (id, expect) in [(7u64, vec![2, 3]), (8, vec![6, 7]), (9, vec![0, 1])] {
            let rec = s.put(ObjectId(id), &mut Cursor::new(payload(id, two_pages)), 65536).unwrap();
            let Placement::Pages(p) = &rec.placement else { unreachable!() };
            assert_eq!(p, &expect);
        }
        s.audit().unwrap();
    }

    #[test]
    fn get_roundtrip_and_header_verification() {
        let mut s = mem_store(16 << 20);
        let data = payload(3, 100 * 1024);
        s.put(ObjectId(3), &mut Cursor::new(&data), 7 * 1024).unwrap();
        assert_eq!(s.get(ObjectId(3)).unwrap(), data);
        // Corrupt one page header: get must detect it.
        let Placement::Pages(pages) = &s.record(ObjectId(3)).unwrap().placement else {
            unreachable!()
        };
        let off = pages[1] * s.page_bytes;
        s.img.write_data(off + 8, &[0xff; 8]).unwrap();
        assert!(matches!(s.get(ObjectId(3)), Err(Error::CorruptImage(_))));
    }

    #[test]
    fn bulk_logged_accounting() {
        let mut s = mem_store(64 << 20);
        let size = 10 * 1024 * 1024u64;
        let before = s.stats();
        s.put(ObjectId(1), &mut Cursor::new(payload(1, size)), 65536).unwrap();
        let after = s.stats();
        // Data-path volume is exactly chain pages × page size.
        assert_eq!(after.bytes_written - before.bytes_written, 1296 * 8192);
        // The log holds metadata only: far smaller than the payload.
        assert!(after.wal_bytes < 16 * 1024, "wal {} bytes", after.wal_bytes);
        // And it never contains payload bytes: scan the log for the marker
        // magic.
        let bytes = s.wal.snapshot_bytes().unwrap();
        assert!(!bytes
            .windows(8)
            .any(|w| w == crate::marker::MARKER_MAGIC));
    }

    #[test]
    fn volume_full_rolls_back() {
        let mut s = mem_store(16 << 20);
        let usable = s.usable_bytes();
        let big = (s.data_pages() - 2) * usable / 1024 * 1024;
        s.put(ObjectId(1), &mut Cursor::new(payload(1, big)), 65536).unwrap();
        let free_before = s.free_pages();
        // Overwrite needs new + old simultaneously: must fail.
        let err = s.put(ObjectId(1), &mut Cursor::new(payload(2, big)), 65536).unwrap_err();
        assert!(matches!(err, Error::VolumeFull { .. }));
        assert_eq!(s.free_pages(), free_before);
        assert_eq!(s.get(ObjectId(1)).unwrap(), payload(1, big));
        s.audit().unwrap();
    }

    #[test]
    fn overwrite_ghosts_old_chain_until_sweep() {
        let mut s = mem_store(16 << 20);
        let size = 200 * 1024u64;
        s.put(ObjectId(1), &mut Cursor::new(payload(1, size)), 65536).unwrap();
        let free_after_first = s.free_pages();
        let chain = size.div_ceil(s.usable_bytes());
        s.put(ObjectId(1), &mut Cursor::new(payload(2, size)), 65536).unwrap();
        // Dead chain is charged until the sweep, but counts as reclaimable.
        assert_eq!(s.free_pages(), free_after_first - chain);
        assert_eq!(s.free_bytes(), free_after_first * s.usable_bytes());
        s.audit().unwrap();
        s.sweep_ghosts().unwrap();
        assert_eq!(s.free_pages(), free_after_first);
        assert_eq!(s.get(ObjectId(1)).unwrap(), payload(2, size));
        s.audit().unwrap();
    }

    #[test]
    fn recovery_before_commit_exposes_old_payload() {
        let mut s = mem_store(16 << 20);
        let size = 150 * 1024u64;
        s.put(ObjectId(1), &mut Cursor::new(payload(1, size)), 65536).unwrap();
        s.checkpoint().unwrap();
        for cut in [
            PageCut::AfterFirstAlloc,
            PageCut::MidData { pages: 3 },
            PageCut::AfterData,
            PageCut::TornCommit { keep: 9 },
        ] {
            s.arm_crash(cut);
            let err = s.put(ObjectId(1), &mut Cursor::new(payload(9, size)), 65536).unwrap_err();
            assert!(matches!(err, Error::InjectedCrash(_)), "{cut:?}");
            let (img, wal_bytes) = s.dismantle().unwrap();
            let recovered =
                PageStore::recover(img, Wal::from_bytes(wal_bytes).unwrap(), PageConfig::default());
            s = recovered.unwrap();
            assert_eq!(s.get(ObjectId(1)).unwrap(), payload(1, size), "{cut:?}");
            s.audit().unwrap();
        }
    }

    #[test]
    fn recovery_after_commit_exposes_new_payload() {
        let mut s = mem_store(16 << 20);
        let size = 150 * 1024u64;
        s.put(ObjectId(1), &mut Cursor::new(payload(1, size)), 65536).unwrap();
        s.arm_crash(PageCut::AfterCommit);
        let err = s.put(ObjectId(1), &mut Cursor::new(payload(2, size)), 65536).unwrap_err();
        assert!(matches!(err, Error::InjectedCrash(_)));
        let (img, wal_bytes) = s.dismantle().unwrap();
        let mut s =
            PageStore::recover(img, Wal::from_bytes(wal_bytes).unwrap(), PageConfig::default()).unwrap();
        assert_eq!(s.get(ObjectId(1)).unwrap(), payload(2, size));
        s.audit().unwrap();
        // Old chain rolled into free space: no leaked pages.
        let live: u64 = {
            let Placement::Pages(p) = &s.record(ObjectId(1)).unwrap().placement else {
                unreachable!()
            };
            p.len() as u64
        };
        assert_eq!(s.free_pages(), s.data_pages() - live);
    }

    #[test]
    fn recovery_is_idempotent_and_noop_when_clean() {
        let mut s = mem_store(16 << 20);
        s.put(ObjectId(1), &mut Cursor::new(payload(1, 64 * 1024)), 65536).unwrap();
        s.put(ObjectId(2), &mut Cursor::new(payload(2, 32 * 1024)), 65536).unwrap();
        s.delete(ObjectId(1)).unwrap();
        let ids_before = s.live_ids();
        let (img, wal_bytes) = s.dismantle().unwrap();
        let s1 = PageStore::recover(
            img,
            Wal::from_bytes(wal_bytes.clone()).unwrap(),
            PageConfig::default(),
        )
        .unwrap();
        assert_eq!(s1.live_ids(), ids_before);
        let (img, _) = s1.dismantle().unwrap();
        let s2 = PageStore::recover(img, Wal::from_bytes(wal_bytes).unwrap(), PageConfig::default())
            .unwrap();
        assert_eq!(s2.live_ids(), ids_before);
        s2.audit().unwrap();
    }

    #[test]
    fn checkpoint_truncates_log_and_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("vol.img");
        let wal_path = dir.path().join("vol.img.wal");
        let img = VolumeImage::create_file(&img_path, Geometry::with_capacity(16 << 20)).unwrap();
        let mut s = PageStore::create_file_backed(img, &wal_path, PageConfig::default()).unwrap();
        s.put(ObjectId(1), &mut Cursor::new(payload(1, 90 * 1024)), 65536).unwrap();
        assert!(s.wal.len_bytes().unwrap() > 0);
        s.checkpoint().unwrap();
        assert_eq!(s.wal.len_bytes().unwrap(), 0);
        s.put(ObjectId(2), &mut Cursor::new(payload(2, 30 * 1024)), 65536).unwrap();
        drop(s);
        let img = VolumeImage::open_file(&img_path).unwrap();
        let mut s = PageStore::open_file_backed(img, &wal_path, PageConfig::default()).unwrap();
        assert_eq!(s.live_ids(), vec![ObjectId(1), ObjectId(2)]);
        assert_eq!(s.get(ObjectId(1)).unwrap(), payload(1, 90 * 1024));
        assert_eq!(s.get(ObjectId(2)).unwrap(), payload(2, 30 * 1024));
        s.audit().unwrap();
    }

    #[test]
    fn defragment_by_copy_contract() {
        let mut s = mem_store(16 << 20);
        let usable = s.usable_bytes();
        let two_pages = 2 * usable / 1024 * 1024;
        for id in 1..=6u64 {
            s.put(ObjectId(id), &mut Cursor::new(payload(id, two_pages)), 65536).unwrap();
        }
        // Interleave overwrites to scatter chains.
        for id in [1u64, 3, 5] {
            s.put(ObjectId(id), &mut Cursor::new(payload(10 + id, 3 * two_pages)), 65536).unwrap();
        }
        let mean_before = {
            let f = s.ground_truth_fragments();
            f.values().sum::<u64>() as f64 / f.len() as f64
        };
        let target = VolumeImage::create_in_memory(Geometry::with_capacity(16 << 20)).unwrap();
        let (fresh, copied) = s.defragment_by_copy(target, Wal::new_memory(), 65536).unwrap();
        assert_eq!(copied, 6);
        let f = fresh.ground_truth_fragments();
        let mean_after = f.values().sum::<u64>() as f64 / f.len() as f64;
        assert_eq!(mean_after, 1.0, "sequential rewrite of id order");
        assert!(mean_after <= mean_before);
        fresh.audit().unwrap();
    }

    #[test]
    fn defragment_refused_without_headroom() {
        let mut s = mem_store(16 << 20);
        let usable = s.usable_bytes();
        let big = (s.data_pages() - 1) * usable / 1024 * 1024;
        s.put(ObjectId(1), &mut Cursor::new(payload(1, big)), 65536).unwrap();
        let target = VolumeImage::create_in_memory(Geometry::with_capacity(16 << 20)).unwrap();
        let Err(err) = s.defragment_by_copy(target, Wal::new_memory(), 65536) else {
            panic!("expected refusal");
        };
        match err {
            Error::DefragRefused(msg) => assert!(msg.contains("largest blob"), "{msg}"),
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn page_cfg_validation() {
        let img = VolumeImage::create_in_memory(Geometry::with_capacity(16 << 20)).unwrap();
        assert!(PageStore::new_memory(img, PageConfig { header_bytes: 100 }).is_err());
        let img = VolumeImage::create_in_memory(Geometry::with_capacity(16 << 20)).unwrap();
        assert!(PageStore::new_memory(img, PageConfig { header_bytes: 8 }).is_err());
        let img = VolumeImage::create_in_memory(Geometry::with_capacity(16 << 20)).unwrap();
        assert!(PageStore::new_memory(img, PageConfig { header_bytes: 128 }).is_ok());
    }
}
