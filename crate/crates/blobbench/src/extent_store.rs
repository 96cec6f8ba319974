//! Simulated extent backend over a volume image, modeled on NTFS behavior:
//! a run-based free-space cache ordered by (length descending, offset
//! ascending), best-effort contiguous allocation with in-place growth for
//! sequential appends, and deferred reuse of freed space — an extent freed by
//! an operation becomes allocatable only once that operation completes.
//!
//! Cluster rounding: allocations are made in whole clusters; a record's
//! extent list is trimmed to exact payload bytes (only the final extent can
//! end off-cluster) and the rounding slack is tracked in
//! `StoreStats::internal_frag_bytes`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use crate::error::{Error, Result};
use crate::store::{
    round_up, BackendKind, BlobRecord, BlobStore, Extent, ObjectId, Placement, StoreStats,
};
use crate::volume::VolumeImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AllocPolicy {
    /// Smallest single run that satisfies the request (minimizes erosion of
    /// large runs).
    #[default]
    BestFit,
    /// Lowest-offset run that satisfies the request. Remnants collect at low
    /// offsets where later small requests recycle them, which keeps the high
    /// end contiguous.
    FirstFit,
    /// Largest run first.
    LargestFirst,
}

impl AllocPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            AllocPolicy::BestFit => "best_fit",
            AllocPolicy::FirstFit => "first_fit",
            AllocPolicy::LargestFirst => "largest_first",
        }
    }
}

impl std::str::FromStr for AllocPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "best_fit" => Ok(AllocPolicy::BestFit),
            "first_fit" => Ok(AllocPolicy::FirstFit),
            "largest_first" => Ok(AllocPolicy::LargestFirst),
            other => Err(format!(
                "unknown alloc policy {other:?} (expected best_fit, first_fit or largest_first)"
            )),
        }
    }
}

/// Free-space cache: the set of free runs plus frees awaiting commit.
#[derive(Debug, Default)]
pub struct RunCache {
    /// (length, offset) — iteration order is length ascending; reverse for
    /// the canonical (length desc, offset asc) view.
    by_size: BTreeSet<(u64, u64)>,
    by_offset: BTreeMap<u64, u64>,
    free_total: u64,
    pending: Vec<Extent>,
    pending_total: u64,
}

impl RunCache {
    fn whole(data_len: u64) -> Self {
        let mut c = RunCache::default();
        if data_len > 0 {
            c.by_size.insert((data_len, 0));
            c.by_offset.insert(0, data_len);
            c.free_total = data_len;
        }
        c
    }

    pub fn free_bytes(&self) -> u64 {
        self.free_total
    }

    pub fn pending_bytes(&self) -> u64 {
        self.pending_total
    }

    pub fn run_count(&self) -> usize {
        self.by_offset.len()
    }

    /// Free runs in (length descending, offset ascending) order.
    pub fn runs_by_size(&self) -> Vec<Extent> {
        let mut runs: Vec<Extent> =
            self.by_size.iter().map(|&(len, offset)| Extent { offset, len }).collect();
        runs.sort_by_key(|e| (std::cmp::Reverse(e.len), e.offset));
        runs
    }

    /// The largest free run; ties broken toward the lowest offset, matching
    /// the cache order.
    fn largest_run(&self) -> Option<(u64, u64)> {
        let &(len, _) = self.by_size.iter().next_back()?;
        self.by_size.range((len, 0)..).next().copied()
    }

    fn remove(&mut self, offset: u64, len: u64) {
        let removed = self.by_size.remove(&(len, offset)) && self.by_offset.remove(&offset).is_some();
        debug_assert!(removed, "cache entry [{offset}, +{len}) missing");
        self.free_total -= len;
    }

    fn insert(&mut self, ext: Extent) -> Result<()> {
        // Strict neighbor checks double as the double-free detector.
        if let Some((&po, &pl)) = self.by_offset.range(..=ext.offset).next_back() {
            if po + pl > ext.offset {
                return Err(Error::Invariant(format!(
                    "free of [{}, +{}) overlaps free run [{po}, +{pl})",
                    ext.offset, ext.len
                )));
            }
        }
        if let Some((&no, _)) = self.by_offset.range(ext.offset..).next() {
            if ext.end() > no {
                return Err(Error::Invariant(format!(
                    "free of [{}, +{}) overlaps free run at {no}",
                    ext.offset, ext.len
                )));
            }
        }
        // Coalesce with abutting neighbors.
        let mut off = ext.offset;
        let mut len = ext.len;
        if let Some((&po, &pl)) = self.by_offset.range(..off).next_back() {
            if po + pl == off {
                self.remove(po, pl);
                off = po;
                len += pl;
            }
        }
        if let Some((&no, &nl)) = self.by_offset.range(off..).next() {
            if off + len == no {
                self.remove(no, nl);
                len += nl;
            }
        }
        self.by_size.insert((len, off));
        self.by_offset.insert(off, len);
        self.free_total += len;
        Ok(())
    }

    /// Take a specific free range if it is wholly free right now (used for
    /// in-place growth and for constructing pathological layouts).
    fn take_at(&mut self, offset: u64, len: u64) -> bool {
        let Some((&ro, &rl)) = self.by_offset.range(..=offset).next_back() else {
            return false;
        };
        if ro > offset || ro + rl < offset + len {
            return false;
        }
        self.remove(ro, rl);
        if ro < offset {
            self.by_size.insert((offset - ro, ro));
            self.by_offset.insert(ro, offset - ro);
            self.free_total += offset - ro;
        }
        let tail = (ro + rl) - (offset + len);
        if tail > 0 {
            self.by_size.insert((tail, offset + len));
            self.by_offset.insert(offset + len, tail);
            self.free_total += tail;
        }
        true
    }

    /// Length of the free run starting exactly at `offset`, if any.
    fn run_at(&self, offset: u64) -> Option<u64> {
        self.by_offset.get(&offset).copied()
    }

    /// Allocate `request` bytes (already cluster-rounded): one run if any is
    /// large enough, else greedily consume the largest runs.
    fn allocate(&mut self, request: u64, policy: AllocPolicy) -> Result<Vec<Extent>> {
        debug_assert!(request > 0);
        if self.free_total < request {
            return Err(Error::VolumeFull { requested: request, free: self.free_total });
        }
        let single = match policy {
            AllocPolicy::BestFit => self.by_size.range((request, 0)..).next().copied(),
            AllocPolicy::FirstFit => self
                .by_offset
                .iter()
                .find(|&(_, &len)| len >= request)
                .map(|(&off, &len)| (len, off)),
            AllocPolicy::LargestFirst => {
                self.largest_run().filter(|&(len, _)| len >= request)
            }
        };
        if let Some((len, off)) = single {
            self.remove(off, len);
            if len > request {
                self.by_size.insert((len - request, off + request));
                self.by_offset.insert(off + request, len - request);
                self.free_total += len - request;
            }
            return Ok(vec![Extent { offset: off, len: request }]);
        }
        // Fragmented allocation: largest runs first.
        let mut out = Vec::new();
        let mut remaining = request;
        while remaining > 0 {
            let (len, off) = self.largest_run().expect("free_total covers request");
            self.remove(off, len);
            if len >= remaining {
                if len > remaining {
                    self.by_size.insert((len - remaining, off + remaining));
                    self.by_offset.insert(off + remaining, len - remaining);
                    self.free_total += len - remaining;
                }
                out.push(Extent { offset: off, len: remaining });
                remaining = 0;
            } else {
                out.push(Extent { offset: off, len });
                remaining -= len;
            }
        }
        Ok(out)
    }

    /// Queue an extent for release; it stays unallocatable until `commit`.
    fn free_pending(&mut self, ext: Extent) {
        self.pending_total += ext.len;
        self.pending.push(ext);
    }

    /// Merge pending frees into the cache, coalescing adjacent runs.
    fn commit(&mut self) -> Result<()> {
        for ext in std::mem::take(&mut self.pending) {
            self.insert(ext)?;
        }
        self.pending_total = 0;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExtentConfig {
    pub policy: AllocPolicy,
}

/// Journaled mutations a fixed-size metadata log holds before it forces a
/// checkpoint. Deferred frees only become allocatable at a checkpoint, so a
/// volume whose free pool outlasts this many operations never starves the
/// allocator, while one that drains faster hits allocation pressure first.
const CHECKPOINT_OPS: u32 = 64;

pub struct ExtentStore {
    img: VolumeImage,
    cache: RunCache,
    table: BTreeMap<ObjectId, BlobRecord>,
    cfg: ExtentConfig,
    stats: StoreStats,
    cluster: u64,
    ops_since_checkpoint: u32,
}

impl ExtentStore {
    pub fn new(img: VolumeImage, cfg: ExtentConfig) -> Result<Self> {
        let cluster = img.geometry().cluster_bytes as u64;
        let cache = RunCache::whole(img.geometry().data_len());
        Ok(ExtentStore {
            img,
            cache,
            table: BTreeMap::new(),
            cfg,
            stats: StoreStats::default(),
            cluster,
            ops_since_checkpoint: 0,
        })
    }

    /// Reopen a store from an image whose metadata region was written by
    /// `close`. Free space is reconstructed as the complement of the live
    /// placements.
    pub fn open(img: VolumeImage, cfg: ExtentConfig) -> Result<Self> {
        let cluster = img.geometry().cluster_bytes as u64;
        let table = crate::meta::read_extent_table(&img)?;
        let mut rounded: Vec<Extent> = Vec::new();
        for rec in table.values() {
            for ext in Self::rounded_extents_of(rec, cluster) {
                rounded.push(ext);
            }
        }
        rounded.sort_by_key(|e| e.offset);
        let mut cache = RunCache::default();
        let mut cursor = 0u64;
        for ext in &rounded {
            if ext.offset < cursor {
                return Err(Error::CorruptImage(format!(
                    "overlapping placements at offset {}",
                    ext.offset
                )));
            }
            if ext.offset > cursor {
                cache.insert(Extent { offset: cursor, len: ext.offset - cursor })?;
            }
            cursor = ext.end();
        }
        let data_len = img.geometry().data_len();
        if cursor > data_len {
            return Err(Error::CorruptImage("placement beyond data region".into()));
        }
        if cursor < data_len {
            cache.insert(Extent { offset: cursor, len: data_len - cursor })?;
        }
        let mut stats = StoreStats::default();
        stats.internal_frag_bytes = table
            .values()
            .map(|r| round_up(r.size, cluster) - r.size)
            .sum();
        Ok(ExtentStore { img, cache, table, cfg, stats, cluster, ops_since_checkpoint: 0 })
    }

    /// Write the blob table into the image's metadata region and flush.
    pub fn close(mut self) -> Result<VolumeImage> {
        self.commit_frees()?;
        crate::meta::write_extent_table(&mut self.img, &self.table)?;
        self.img.flush()?;
        Ok(self.img)
    }

    pub fn image(&self) -> &VolumeImage {
        &self.img
    }

    pub fn into_image(self) -> VolumeImage {
        self.img
    }

    pub fn run_cache(&self) -> &RunCache {
        &self.cache
    }

    pub fn record(&self, id: ObjectId) -> Option<&BlobRecord> {
        self.table.get(&id)
    }

    /// The allocation ledger works in whole clusters; only the final extent
    /// of a record is trimmed, so rounding its length back up reconstructs
    /// the allocated ranges exactly.
    fn rounded_extents_of(rec: &BlobRecord, cluster: u64) -> Vec<Extent> {
        let Placement::Extents(exts) = &rec.placement else {
            unreachable!("extent store records hold extents")
        };
        let mut out = exts.clone();
        if let Some(last) = out.last_mut() {
            last.len = round_up(last.len, cluster);
        }
        out
    }

    fn check_buffer(&self, buffer_bytes: usize) -> Result<u64> {
        let b = buffer_bytes as u64;
        if b == 0 || b % self.cluster != 0 {
            return Err(Error::Config(format!(
                "write buffer {b} must be a positive multiple of the {}-byte cluster",
                self.cluster
            )));
        }
        Ok(b)
    }

    /// Full-volume accounting check: live rounded placements ⊎ free runs ⊎
    /// pending frees tile the data region exactly.
    pub fn audit(&self) -> Result<()> {
        let mut ranges: Vec<(u64, u64, &'static str)> = Vec::new();
        for rec in self.table.values() {
            let exts = Self::rounded_extents_of(rec, self.cluster);
            let mut payload = 0u64;
            if let Placement::Extents(raw) = &rec.placement {
                for e in raw {
                    payload += e.len;
                }
                if payload != rec.size {
                    return Err(Error::Invariant(format!(
                        "blob {} extents sum to {payload}, size is {}",
                        rec.id, rec.size
                    )));
                }
                for w in raw.windows(2) {
                    if w[0].end() == w[1].offset {
                        return Err(Error::Invariant(format!(
                            "blob {} has unmerged abutting extents at {}",
                            rec.id,
                            w[1].offset
                        )));
                    }
                }
            }
            for e in exts {
                if e.offset % self.cluster != 0 {
                    return Err(Error::Invariant(format!(
                        "blob {} extent at {} not cluster-aligned",
                        rec.id, e.offset
                    )));
                }
                ranges.push((e.offset, e.len, "live"));
            }
        }
        for (&off, &len) in &self.cache.by_offset {
            if self.cache.by_size.get(&(len, off)).is_none() {
                return Err(Error::Invariant("run cache index mismatch".into()));
            }
            ranges.push((off, len, "free"));
        }
        if self.cache.by_size.len() != self.cache.by_offset.len() {
            return Err(Error::Invariant("run cache index sizes differ".into()));
        }
        for e in &self.cache.pending {
            ranges.push((e.offset, e.len, "pending"));
        }
        ranges.sort_by_key(|r| r.0);
        let mut cursor = 0u64;
        for (off, len, kind) in &ranges {
            if *off != cursor {
                return Err(Error::Invariant(format!(
                    "conservation gap/overlap before {kind} range at {off} (cursor {cursor})"
                )));
            }
            cursor = off + len;
        }
        if cursor != self.img.geometry().data_len() {
            return Err(Error::Invariant(format!(
                "conservation: ranges end at {cursor}, data region is {}",
                self.img.geometry().data_len()
            )));
        }
        let free: u64 = self.cache.by_offset.values().sum();
        if free != self.cache.free_total {
            return Err(Error::Invariant("free_total out of sync".into()));
        }
        Ok(())
    }

    /// Merge deferred frees into the allocatable run set — the modeled log
    /// flush. Invoked on the journal-fill cadence, by allocation pressure
    /// inside put, between workload phases, and before maintenance that wants
    /// the full free map. Every flush truncates the journal, so the cadence
    /// counter restarts.
    pub fn commit_frees(&mut self) -> Result<()> {
        self.ops_since_checkpoint = 0;
        self.cache.commit()
    }

    /// Count one journaled mutation; a full journal forces a checkpoint.
    fn note_op(&mut self) -> Result<()> {
        self.ops_since_checkpoint += 1;
        if self.ops_since_checkpoint >= CHECKPOINT_OPS {
            self.commit_frees()?;
        }
        Ok(())
    }

    /// Relocate multi-extent blobs into single runs, largest gain first.
    /// Old locations are zeroed so raw scans don't see duplicate live tags.
    /// Returns the number of blobs relocated.
    pub fn defragment(&mut self) -> Result<u64> {
        self.commit_frees()?;
        let mut worst: Vec<(u64, ObjectId)> = self
            .table
            .values()
            .filter(|r| r.placement.fragment_count() > 1)
            .map(|r| (r.placement.fragment_count(), r.id))
            .collect();
        worst.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut moved = 0u64;
        for (_, id) in worst {
            let rec = self.table.get(&id).expect("listed id is live").clone();
            let rounded = round_up(rec.size, self.cluster);
            let Some(&(len, off)) = self.cache.by_size.range((rounded, 0)..).next() else {
                continue; // best-effort: nothing large enough right now
            };
            let _ = len;
            if !self.cache.take_at(off, rounded) {
                continue;
            }
            let payload = self.read_payload(&rec)?;
            self.img.write_data(off, &payload)?;
            for e in Self::rounded_extents_of(&rec, self.cluster) {
                self.img.zero_data(e.offset, e.len)?;
                self.cache.free_pending(e);
            }
            let new_rec = BlobRecord {
                id,
                size: rec.size,
                generation: rec.generation,
                placement: Placement::Extents(vec![Extent { offset: off, len: rec.size }]),
            };
            self.table.insert(id, new_rec);
            self.commit_frees()?;
            moved += 1;
        }
        Ok(moved)
    }

    /// Rebuild the volume into a deliberately pathological layout: every
    /// blob diced into `piece_bytes` pieces, pieces of different blobs
    /// interleaved, free space scattered between rounds. Mean fragments per
    /// object afterwards ≈ size / piece_bytes. Used to study whether churn
    /// heals a badly fragmented volume.
    pub fn shatter(&mut self, piece_bytes: u64) -> Result<()> {
        if piece_bytes == 0 || piece_bytes % self.cluster != 0 {
            return Err(Error::Config(format!(
                "piece size {piece_bytes} must be a positive multiple of the cluster"
            )));
        }
        self.commit_frees()?;
        let ids: Vec<ObjectId> = self.table.keys().copied().collect();
        if ids.is_empty() {
            return Ok(());
        }
        // Materialize everything, then relay the whole data region.
        let mut payloads = Vec::with_capacity(ids.len());
        for &id in &ids {
            let rec = self.table[&id].clone();
            payloads.push(self.read_payload(&rec)?);
        }
        let data_len = self.img.geometry().data_len();
        self.img.zero_data(0, data_len)?;
        self.cache = RunCache::whole(data_len);

        // Piece layout plan: rounds of one piece per blob, a free gap after
        // each round.
        let piece_counts: Vec<u64> = ids
            .iter()
            .map(|id| round_up(self.table[id].size, self.cluster).div_ceil(piece_bytes))
            .collect();
        let rounds = *piece_counts.iter().max().unwrap();
        let live_rounded: u64 = ids.iter().map(|id| round_up(self.table[id].size, self.cluster)).sum();
        let free_total = data_len - live_rounded;
        let gap = (free_total / rounds) / self.cluster * self.cluster;

        let mut placements: Vec<Vec<Extent>> = vec![Vec::new(); ids.len()];
        let mut cursor = 0u64;
        for round in 0..rounds {
            for (i, id) in ids.iter().enumerate() {
                if round >= piece_counts[i] {
                    continue;
                }
                let rounded = round_up(self.table[id].size, self.cluster);
                let len = piece_bytes.min(rounded - round * piece_bytes);
                placements[i].push(Extent { offset: cursor, len });
                cursor += len;
            }
            if gap > 0 && cursor + gap <= data_len {
                cursor += gap;
            }
        }
        for (i, id) in ids.iter().enumerate() {
            let mut written = 0usize;
            for ext in &placements[i] {
                let ok = self.cache.take_at(ext.offset, ext.len);
                debug_assert!(ok, "shatter plan overlaps free space");
                let end = (written as u64 + ext.len).min(payloads[i].len() as u64) as usize;
                self.img.write_data(ext.offset, &payloads[i][written..end])?;
                written = end;
            }
            let rec = self.table.get_mut(id).expect("live");
            // Trim the final piece back to exact payload bytes (the slack is
            // under one cluster, so it never empties the last extent).
            let mut exts = placements[i].clone();
            let excess = round_up(rec.size, self.cluster) - rec.size;
            if excess > 0 {
                exts.last_mut().expect("non-empty placement").len -= excess;
            }
            rec.placement = Placement::Extents(exts);
        }
        self.audit()
    }

    fn read_payload(&self, rec: &BlobRecord) -> Result<Vec<u8>> {
        let Placement::Extents(exts) = &rec.placement else {
            unreachable!("extent store records hold extents")
        };
        let mut out = vec![0u8; rec.size as usize];
        let mut done = 0usize;
        for e in exts {
            self.img.read_data(e.offset, &mut out[done..done + e.len as usize])?;
            done += e.len as usize;
        }
        Ok(out)
    }

    /// Push `ext` onto a placement, merging when physically contiguous.
    fn push_extent(exts: &mut Vec<Extent>, ext: Extent) {
        if let Some(last) = exts.last_mut() {
            if last.end() == ext.offset {
                last.len += ext.len;
                return;
            }
        }
        exts.push(ext);
    }

    fn rollback_alloc(&mut self, exts: Vec<Extent>) {
        // A never-committed allocation goes straight back to the cache; the
        // deferred-reuse rule applies to freed *data*, not aborted requests.
        for e in exts {
            self.cache
                .insert(e)
                .expect("rolling back freshly allocated extents cannot overlap");
        }
    }
}

impl BlobStore for ExtentStore {
    fn put(&mut self, id: ObjectId, payload: &mut dyn Read, buffer_bytes: usize) -> Result<BlobRecord> {
        let buffer = self.check_buffer(buffer_bytes)?;
        let old = self.table.get(&id).cloned();
        let generation = old.as_ref().map_or(1, |r| r.generation + 1);
        let mut chunk = vec![0u8; buffer as usize];
        let mut new_exts: Vec<Extent> = Vec::new();
        let mut written = 0u64;
        loop {
            let n = read_full(payload, &mut chunk)?;
            if n == 0 {
                break;
            }
            self.stats.allocator_requests += 1;
            let chunk_rounded = round_up(n as u64, self.cluster);
            let mut chunk_exts: Vec<Extent> = Vec::new();
            let mut remaining = chunk_rounded;
            let mut flushed = false;
            while remaining > 0 {
                // Prefer growing the last extent in place.
                let tail = chunk_exts
                    .last()
                    .map(Extent::end)
                    .or_else(|| new_exts.last().map(Extent::end));
                if let Some(t) = tail {
                    if let Some(run_len) = self.cache.run_at(t) {
                        let take = remaining.min(run_len);
                        let ok = self.cache.take_at(t, take);
                        debug_assert!(ok);
                        chunk_exts.push(Extent { offset: t, len: take });
                        remaining -= take;
                        continue;
                    }
                }
                match self.cache.allocate(remaining, self.cfg.policy) {
                    Ok(more) => {
                        chunk_exts.extend(more);
                        remaining = 0;
                    }
                    Err(Error::VolumeFull { .. })
                        if !flushed && self.cache.pending_bytes() > 0 =>
                    {
                        // Freed space is unusable until its log entries
                        // commit; a shortfall forces that commit, then the
                        // request is retried. Frees from this operation's own
                        // overwrite are not in the queue yet, so the old copy
                        // stays intact.
                        self.commit_frees()?;
                        flushed = true;
                    }
                    Err(e) => {
                        // Return the partial allocation; the store is
                        // unchanged for this id.
                        self.rollback_alloc(chunk_exts);
                        self.rollback_alloc(new_exts);
                        return Err(e);
                    }
                }
            }
            // Write the chunk's payload across its extents (the final
            // cluster's slack is left as-is; it is rounding waste).
            let mut src = 0u64;
            for e in &chunk_exts {
                let take = e.len.min(n as u64 - src);
                self.img.write_data(e.offset, &chunk[src as usize..(src + take) as usize])?;
                src += take;
                if src == n as u64 {
                    break;
                }
            }
            for e in chunk_exts {
                Self::push_extent(&mut new_exts, e);
            }
            self.stats.bytes_written += n as u64;
            written += n as u64;
        }
        if written == 0 {
            self.rollback_alloc(new_exts);
            return Err(Error::Config("empty payload".into()));
        }
        // Trim the final extent to exact payload length.
        let slack = round_up(written, self.cluster) - written;
        if slack > 0 {
            new_exts.last_mut().expect("wrote something").len -= slack;
        }
        // Safe-write order: the new generation is fully placed before the old
        // one is released. The release sits in the deferred-free queue until
        // a later allocation shortfall (or a phase boundary) commits it.
        if let Some(old_rec) = &old {
            for e in Self::rounded_extents_of(old_rec, self.cluster) {
                self.cache.free_pending(e);
            }
            self.stats.internal_frag_bytes -= round_up(old_rec.size, self.cluster) - old_rec.size;
        }
        self.stats.internal_frag_bytes += slack;
        let rec = BlobRecord { id, size: written, generation, placement: Placement::Extents(new_exts) };
        self.table.insert(id, rec.clone());
        self.note_op()?;
        Ok(rec)
    }

    fn get(&mut self, id: ObjectId) -> Result<Vec<u8>> {
        let rec = self.table.get(&id).cloned().ok_or(Error::NotFound(id))?;
        let out = self.read_payload(&rec)?;
        self.stats.bytes_read += out.len() as u64;
        Ok(out)
    }

    fn delete(&mut self, id: ObjectId) -> Result<u64> {
        let rec = self.table.remove(&id).ok_or(Error::NotFound(id))?;
        for e in Self::rounded_extents_of(&rec, self.cluster) {
            self.cache.free_pending(e);
        }
        self.stats.internal_frag_bytes -= round_up(rec.size, self.cluster) - rec.size;
        self.note_op()?;
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
        self.stats
    }

    fn free_bytes(&self) -> u64 {
        // Deferred frees are still free space for capacity accounting; they
        // are only unavailable to the allocator until the next commit.
        self.cache.free_total + self.cache.pending_total
    }

    fn ground_truth_fragments(&self) -> BTreeMap<ObjectId, u64> {
        self.table
            .iter()
            .map(|(&id, rec)| (id, rec.placement.fragment_count()))
            .collect()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Extent
    }
}

pub(crate) fn read_full(r: &mut dyn Read, buf: &mut [u8]) -> Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        let got = r.read(&mut buf[n..])?;
        if got == 0 {
            break;
        }
        n += got;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use std::io::Cursor;

    fn mem_store(capacity: u64) -> ExtentStore {
        let img = VolumeImage::create_in_memory(Geometry::with_capacity(capacity)).unwrap();
        ExtentStore::new(img, ExtentConfig::default()).unwrap()
    }

    fn cache_with(runs: &[(u64, u64)]) -> RunCache {
        let mut c = RunCache::default();
        for &(off, len) in runs {
            c.insert(Extent { offset: off, len }).unwrap();
        }
        c
    }

    #[test]
    fn single_run_split() {
        // One 1MB run, 64KB request: one extent, run shrinks to 960KB.
        let mut c = cache_with(&[(0, 1024 * 1024)]);
        let got = c.allocate(64 * 1024, AllocPolicy::BestFit).unwrap();
        assert_eq!(got, vec![Extent { offset: 0, len: 64 * 1024 }]);
        assert_eq!(c.free_bytes(), 960 * 1024);
        assert_eq!(c.run_count(), 1);
    }

    #[test]
    fn greedy_fragmented_allocation() {
        // Runs {128KB, 96KB, 64KB}, request 256KB → 128 + 96 + 32-of-64.
        let k = 1024u64;
        let mut c = cache_with(&[(0, 128 * k), (200 * k, 96 * k), (400 * k, 64 * k)]);
        let got = c.allocate(256 * k, AllocPolicy::BestFit).unwrap();
        let lens: Vec<u64> = got.iter().map(|e| e.len).collect();
        assert_eq!(lens, vec![128 * k, 96 * k, 32 * k]);
        assert_eq!(c.free_bytes(), 32 * k);
    }

    #[test]
    fn pending_space_not_allocatable() {
        let mut c = cache_with(&[(0, 64 * 1024)]);
        c.free_pending(Extent { offset: 128 * 1024, len: 64 * 1024 });
        // 128KB requested; 64KB committed free + 64KB pending → still full.
        let err = c.allocate(128 * 1024, AllocPolicy::BestFit).unwrap_err();
        match err {
            Error::VolumeFull { requested, free } => {
                assert_eq!((requested, free), (128 * 1024, 64 * 1024));
            }
            other => panic!("expected VolumeFull, got {other:?}"),
        }
        c.commit().unwrap();
        // Committed, the same request is satisfied greedily from both runs.
        let exts = c.allocate(128 * 1024, AllocPolicy::BestFit).unwrap();
        assert_eq!(exts.len(), 2);
        assert_eq!(c.free_bytes(), 0);
    }

    #[test]
    fn adjacent_frees_coalesce_at_commit() {
        let mut c = RunCache::default();
        c.free_pending(Extent { offset: 0, len: 4096 });
        c.free_pending(Extent { offset: 4096, len: 4096 });
        c.commit().unwrap();
        assert_eq!(c.run_count(), 1);
        assert_eq!(c.free_bytes(), 8192);
    }

    #[test]
    fn double_free_detected() {
        let mut c = cache_with(&[(0, 4096)]);
        c.free_pending(Extent { offset: 0, len: 4096 });
        assert!(matches!(c.commit(), Err(Error::Invariant(_))));
    }

    #[test]
    fn ordering_is_length_desc_offset_asc() {
        let c = cache_with(&[(0, 4096), (8192, 16384), (65536, 16384)]);
        let runs: Vec<(u64, u64)> = c.runs_by_size().into_iter().map(|e| (e.len, e.offset)).collect();
        assert_eq!(runs, vec![(16384, 8192), (16384, 65536), (4096, 0)]);
    }

    #[test]
    fn put_get_delete_roundtrip_and_audit() {
        let mut s = mem_store(16 << 20);
        let payload = crate::marker::make_payload(1, 300 * 1024, 0).unwrap();
        let rec = s.put(ObjectId(1), &mut Cursor::new(&payload), 64 * 1024).unwrap();
        assert_eq!(rec.placement.fragment_count(), 1);
        assert_eq!(s.get(ObjectId(1)).unwrap(), payload);
        s.audit().unwrap();
        // 300KB rounds to 76 clusters; slack 0 (300KB is cluster-aligned).
        assert_eq!(s.stats().internal_frag_bytes, 0);
        assert_eq!(s.delete(ObjectId(1)).unwrap(), 300 * 1024);
        assert!(matches!(s.get(ObjectId(1)), Err(Error::NotFound(_))));
        s.audit().unwrap();
        assert_eq!(s.free_bytes(), s.image().geometry().data_len());
    }

    #[test]
    fn sequential_append_on_empty_volume_is_contiguous() {
        let mut s = mem_store(64 << 20);
        let payload = crate::marker::make_payload(9, 10 * 1024 * 1024, 0).unwrap();
        let rec = s.put(ObjectId(9), &mut Cursor::new(&payload), 64 * 1024).unwrap();
        assert_eq!(rec.placement.fragment_count(), 1);
        // 160 chunk appends for 10MB at 64KB.
        assert_eq!(s.stats().allocator_requests, 160);
    }

    #[test]
    fn blocked_append_fragments_once() {
        let mut s = mem_store(16 << 20);
        let a = crate::marker::make_payload(1, 128 * 1024, 0).unwrap();
        let b = crate::marker::make_payload(2, 64 * 1024, 0).unwrap();
        s.put(ObjectId(1), &mut Cursor::new(&a), 64 * 1024).unwrap();
        s.put(ObjectId(2), &mut Cursor::new(&b), 64 * 1024).unwrap();
        // Growing object 1 must jump over object 2.
        let a2 = crate::marker::make_payload(3, 256 * 1024, 0).unwrap();
        let rec = s.put(ObjectId(1), &mut Cursor::new(&a2), 64 * 1024).unwrap();
        // New generation is written after object 2's region; old copy freed.
        assert_eq!(rec.size, 256 * 1024);
        s.audit().unwrap();
        assert_eq!(s.get(ObjectId(1)).unwrap(), a2);
        assert_eq!(s.get(ObjectId(2)).unwrap(), b);
    }

    #[test]
    fn safe_write_needs_room_for_old_and_new() {
        // Data region exactly fits ~2 objects; safe-write of one must fail
        // when the other occupies the remaining space.
        let img = VolumeImage::create_in_memory(Geometry::new(4 << 20, 4096, 8192, 512 * 1024)).unwrap();
        let data = img.geometry().data_len();
        let mut s = ExtentStore::new(img, ExtentConfig::default()).unwrap();
        let half = data / 2 / 1024 * 1024;
        let a = crate::marker::make_payload(1, half, 0).unwrap();
        let b = crate::marker::make_payload(2, data - half - 64 * 1024, 0).unwrap();
        s.put(ObjectId(1), &mut Cursor::new(&a), 64 * 1024).unwrap();
        s.put(ObjectId(2), &mut Cursor::new(&b), 64 * 1024).unwrap();
        let a2 = crate::marker::make_payload(3, half, 0).unwrap();
        let err = s.put(ObjectId(1), &mut Cursor::new(&a2), 64 * 1024).unwrap_err();
        assert!(matches!(err, Error::VolumeFull { .. }));
        // Old generation intact after the failed safe-write.
        assert_eq!(s.get(ObjectId(1)).unwrap(), a);
        s.audit().unwrap();
    }

    #[test]
    fn close_open_roundtrip() {
        let mut s = mem_store(16 << 20);
        let a = crate::marker::make_payload(1, 128 * 1024, 0).unwrap();
        let b = crate::marker::make_payload(2, 65 * 1024, 0).unwrap(); // slack 3KB
        s.put(ObjectId(1), &mut Cursor::new(&a), 64 * 1024).unwrap();
        s.put(ObjectId(2), &mut Cursor::new(&b), 64 * 1024).unwrap();
        s.delete(ObjectId(1)).unwrap();
        let free_before = s.free_bytes();
        let img = s.close().unwrap();
        let mut s2 = ExtentStore::open(img, ExtentConfig::default()).unwrap();
        assert_eq!(s2.live_ids(), vec![ObjectId(2)]);
        assert_eq!(s2.get(ObjectId(2)).unwrap(), b);
        assert_eq!(s2.free_bytes(), free_before);
        assert_eq!(s2.stats().internal_frag_bytes, 3 * 1024);
        s2.audit().unwrap();
    }

    #[test]
    fn defragment_reduces_to_single_extents() {
        let mut s = mem_store(32 << 20);
        // Interleave two growing objects to force fragmentation.
        for round in 0..6u64 {
            for id in 1..=2u64 {
                let size = 64 * 1024 * (round + 1);
                let tag = round * 10 + id;
                let p = crate::marker::make_payload(tag, size, 0).unwrap();
                s.put(ObjectId(id), &mut Cursor::new(&p), 64 * 1024).unwrap();
            }
        }
        let before: u64 = s.ground_truth_fragments().values().sum();
        let moved = s.defragment().unwrap();
        let after: u64 = s.ground_truth_fragments().values().sum();
        assert!(after <= before);
        assert!(moved > 0 || before == s.table.len() as u64);
        assert!(s.ground_truth_fragments().values().all(|&f| f == 1));
        s.audit().unwrap();
        // Payloads survive relocation.
        let p = crate::marker::make_payload(5 * 10 + 1, 64 * 1024 * 6, 0).unwrap();
        assert_eq!(s.get(ObjectId(1)).unwrap(), p);
    }

    #[test]
    fn shatter_dices_blobs_and_free_space() {
        let mut s = mem_store(32 << 20);
        let mut payloads = Vec::new();
        for id in 1..=8u64 {
            let p = crate::marker::make_payload(id, 2 * 1024 * 1024, 0).unwrap();
            s.put(ObjectId(id), &mut Cursor::new(&p), 64 * 1024).unwrap();
            payloads.push(p);
        }
        s.shatter(64 * 1024).unwrap();
        let frags = s.ground_truth_fragments();
        for (_, &f) in &frags {
            assert_eq!(f, 32, "2MB diced into 64KB pieces");
        }
        for id in 1..=8u64 {
            assert_eq!(s.get(ObjectId(id)).unwrap(), payloads[id as usize - 1]);
        }
        assert!(s.run_cache().run_count() > 8, "free space scattered");
    }

    #[test]
    fn buffer_must_be_cluster_aligned() {
        let mut s = mem_store(16 << 20);
        let p = crate::marker::make_payload(1, 64 * 1024, 0).unwrap();
        let err = s.put(ObjectId(1), &mut Cursor::new(&p), 3 * 1024).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
