//! Blob-table serialization for the image metadata region, so placements can
//! be read back offline (reopen, defrag, ground-truth comparison) without any
//! state outside the image and, for the page backend, its log.
//!
//! Layout, all little-endian, at metadata offset 0:
//!
//! ```text
//! 0..8    magic "BBMETA01"
//! 8       backend (1 = extent, 2 = page)
//! 9..12   reserved
//! 12..16  body length (u32)
//! 16..    body
//! then    CRC32 (u32) over everything above
//! ```
//!
//! Extent body: `record_count u64`, then per record `id u64, size u64,
//! generation u64, extent_count u32, (offset u64, len u64)*`.
//!
//! Page body: `checkpoint_lsn u64, record_count u64`, then per record
//! `id u64, size u64, generation u64, run_count u32, (first_page u64,
//! page_count u64)*` — page chains are stored run-length encoded.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::store::{BlobRecord, Extent, ObjectId, Placement};
use crate::volume::VolumeImage;

const META_MAGIC: [u8; 8] = *b"BBMETA01";
const BACKEND_EXTENT: u8 = 1;
const BACKEND_PAGE: u8 = 2;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        if end > self.buf.len() {
            return Err(Error::CorruptImage("metadata body truncated".into()));
        }
        let v = u32::from_le_bytes(self.buf[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    fn u64(&mut self) -> Result<u64> {
        let end = self.pos + 8;
        if end > self.buf.len() {
            return Err(Error::CorruptImage("metadata body truncated".into()));
        }
        let v = u64::from_le_bytes(self.buf[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }
}

fn write_region(img: &mut VolumeImage, backend: u8, body: &[u8]) -> Result<()> {
    let total = 16 + body.len() + 4;
    if total as u64 > img.geometry().metadata_len {
        return Err(Error::Invariant(format!(
            "blob table needs {total} bytes, metadata region holds {}",
            img.geometry().metadata_len
        )));
    }
    let mut buf = Vec::with_capacity(total);
    buf.extend_from_slice(&META_MAGIC);
    buf.push(backend);
    buf.extend_from_slice(&[0u8; 3]);
    put_u32(&mut buf, body.len() as u32);
    buf.extend_from_slice(body);
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    img.write_metadata(0, &buf)
}

fn read_region(img: &VolumeImage, expect_backend: u8) -> Result<Vec<u8>> {
    let mut head = [0u8; 16];
    img.read_metadata(0, &mut head)?;
    if head[0..8] != META_MAGIC {
        return Err(Error::CorruptImage("no blob table in metadata region".into()));
    }
    if head[8] != expect_backend {
        return Err(Error::CorruptImage(format!(
            "blob table written by backend {} (expected {expect_backend})",
            head[8]
        )));
    }
    let body_len = u32::from_le_bytes(head[12..16].try_into().unwrap()) as u64;
    if 16 + body_len + 4 > img.geometry().metadata_len {
        return Err(Error::CorruptImage("metadata body length out of range".into()));
    }
    let mut rest = vec![0u8; body_len as usize + 4];
    img.read_metadata(16, &mut rest)?;
    let stored = u32::from_le_bytes(rest[body_len as usize..].try_into().unwrap());
    let mut h = crc32fast::Hasher::new();
    h.update(&head);
    h.update(&rest[..body_len as usize]);
    if h.finalize() != stored {
        return Err(Error::CorruptImage("blob table CRC mismatch".into()));
    }
    rest.truncate(body_len as usize);
    Ok(rest)
}

pub fn write_extent_table(img: &mut VolumeImage, table: &BTreeMap<ObjectId, BlobRecord>) -> Result<()> {
    let mut body = Vec::new();
    put_u64(&mut body, table.len() as u64);
    for rec in table.values() {
        let Placement::Extents(exts) = &rec.placement else {
            return Err(Error::Invariant("extent table holds non-extent placement".into()));
        };
        put_u64(&mut body, rec.id.0);
        put_u64(&mut body, rec.size);
        put_u64(&mut body, rec.generation);
        put_u32(&mut body, exts.len() as u32);
        for e in exts {
            put_u64(&mut body, e.offset);
            put_u64(&mut body, e.len);
        }
    }
    write_region(img, BACKEND_EXTENT, &body)
}

pub fn read_extent_table(img: &VolumeImage) -> Result<BTreeMap<ObjectId, BlobRecord>> {
    let body = read_region(img, BACKEND_EXTENT)?;
    let mut r = Reader { buf: &body, pos: 0 };
    let count = r.u64()?;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let id = ObjectId(r.u64()?);
        let size = r.u64()?;
        let generation = r.u64()?;
        let n = r.u32()?;
        let mut exts = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let offset = r.u64()?;
            let len = r.u64()?;
            exts.push(Extent { offset, len });
        }
        table.insert(id, BlobRecord { id, size, generation, placement: Placement::Extents(exts) });
    }
    Ok(table)
}

/// Run-length encode an ordered page list.
pub fn pages_to_runs(pages: &[u64]) -> Vec<(u64, u64)> {
    let mut runs: Vec<(u64, u64)> = Vec::new();
    for &p in pages {
        match runs.last_mut() {
            Some((start, count)) if *start + *count == p => *count += 1,
            _ => runs.push((p, 1)),
        }
    }
    runs
}

pub fn write_page_table(
    img: &mut VolumeImage,
    table: &BTreeMap<ObjectId, BlobRecord>,
    checkpoint_lsn: u64,
) -> Result<()> {
    let mut body = Vec::new();
    put_u64(&mut body, checkpoint_lsn);
    put_u64(&mut body, table.len() as u64);
    for rec in table.values() {
        let Placement::Pages(pages) = &rec.placement else {
            return Err(Error::Invariant("page table holds non-page placement".into()));
        };
        let runs = pages_to_runs(pages);
        put_u64(&mut body, rec.id.0);
        put_u64(&mut body, rec.size);
        put_u64(&mut body, rec.generation);
        put_u32(&mut body, runs.len() as u32);
        for (start, count) in runs {
            put_u64(&mut body, start);
            put_u64(&mut body, count);
        }
    }
    write_region(img, BACKEND_PAGE, &body)
}

pub fn read_page_table(img: &VolumeImage) -> Result<(BTreeMap<ObjectId, BlobRecord>, u64)> {
    let body = read_region(img, BACKEND_PAGE)?;
    let mut r = Reader { buf: &body, pos: 0 };
    let checkpoint_lsn = r.u64()?;
    let count = r.u64()?;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let id = ObjectId(r.u64()?);
        let size = r.u64()?;
        let generation = r.u64()?;
        let n = r.u32()?;
        let mut pages = Vec::new();
        for _ in 0..n {
            let start = r.u64()?;
            let run = r.u64()?;
            pages.extend(start..start + run);
        }
        table.insert(id, BlobRecord { id, size, generation, placement: Placement::Pages(pages) });
    }
    Ok((table, checkpoint_lsn))
}
