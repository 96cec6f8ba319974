//! Flat volume images: the byte-addressable substrate both simulated
//! backends allocate from and the raw scanner reads.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! 0..8      magic "BLOBVOL1"
//! 8..12     format version (u32, currently 1)
//! 12..16    cluster_bytes (u32)
//! 16..20    page_bytes (u32)
//! 20..24    reserved (0)
//! 24..32    capacity_bytes (u64, total image size)
//! 32..40    metadata offset (u64, always 65536)
//! 40..48    metadata length (u64)
//! 48..56    data region offset (u64)
//! 56..64    data region length (u64)
//! 64..65536 reserved (zero)
//! ```
//!
//! The 64 KiB header is followed by the metadata region (blob table and
//! allocator snapshot, see the backend modules) and then the data region,
//! which is the only part a scan ever reads.

use std::fs::{File, OpenOptions};
use std::path::Path;

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: [u8; 8] = *b"BLOBVOL1";
pub const VOLUME_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 65536;

pub const DEFAULT_CLUSTER: u32 = 4096;
pub const DEFAULT_PAGE: u32 = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub capacity_bytes: u64,
    pub cluster_bytes: u32,
    pub page_bytes: u32,
    pub metadata_len: u64,
}

impl Geometry {
    /// Geometry with defaults and an automatically sized metadata region
    /// (1/64 of capacity, at least 256 KiB — enough for a worst-case
    /// fully-shattered blob table on either backend).
    pub fn with_capacity(capacity_bytes: u64) -> Self {
        Self::new(capacity_bytes, DEFAULT_CLUSTER, DEFAULT_PAGE, 0)
    }

    /// `metadata_len` 0 means auto-size.
    pub fn new(capacity_bytes: u64, cluster_bytes: u32, page_bytes: u32, metadata_len: u64) -> Self {
        let align = cluster_bytes.max(page_bytes) as u64;
        let metadata_len = if metadata_len == 0 {
            let auto = (capacity_bytes / 64).max(256 * 1024);
            auto.div_ceil(align) * align
        } else {
            metadata_len
        };
        Geometry { capacity_bytes, cluster_bytes, page_bytes, metadata_len }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cluster_bytes", self.cluster_bytes), ("page_bytes", self.page_bytes)] {
            if !(512..=65536).contains(&v) || !v.is_power_of_two() {
                return Err(Error::Config(format!(
                    "{name} {v} must be a power of two in [512, 65536]"
                )));
            }
        }
        let align = self.align();
        if self.capacity_bytes % align != 0 {
            return Err(Error::Config(format!(
                "capacity {} must be a multiple of {align} (cluster and page size)",
                self.capacity_bytes
            )));
        }
        if self.metadata_len % align != 0 {
            return Err(Error::Config(format!(
                "metadata length {} must be a multiple of {align}",
                self.metadata_len
            )));
        }
        if self.capacity_bytes <= self.data_offset() + align {
            return Err(Error::Config(format!(
                "capacity {} leaves no data region after {} bytes of header+metadata",
                self.capacity_bytes,
                self.data_offset()
            )));
        }
        Ok(())
    }

    /// Both cluster and page divide this (powers of two), so every region
    /// boundary is aligned for both backends.
    pub fn align(&self) -> u64 {
        self.cluster_bytes.max(self.page_bytes) as u64
    }

    pub fn metadata_offset(&self) -> u64 {
        HEADER_LEN
    }

    pub fn data_offset(&self) -> u64 {
        HEADER_LEN + self.metadata_len
    }

    pub fn data_len(&self) -> u64 {
        self.capacity_bytes - self.data_offset()
    }

    fn encode(&self) -> [u8; 64] {
        let mut h = [0u8; 64];
        h[0..8].copy_from_slice(&VOLUME_MAGIC);
        h[8..12].copy_from_slice(&VOLUME_VERSION.to_le_bytes());
        h[12..16].copy_from_slice(&self.cluster_bytes.to_le_bytes());
        h[16..20].copy_from_slice(&self.page_bytes.to_le_bytes());
        h[24..32].copy_from_slice(&self.capacity_bytes.to_le_bytes());
        h[32..40].copy_from_slice(&self.metadata_offset().to_le_bytes());
        h[40..48].copy_from_slice(&self.metadata_len.to_le_bytes());
        h[48..56].copy_from_slice(&self.data_offset().to_le_bytes());
        h[56..64].copy_from_slice(&self.data_len().to_le_bytes());
        h
    }

    fn decode(h: &[u8]) -> Result<Self> {
        if h[0..8] != VOLUME_MAGIC {
            return Err(Error::CorruptImage("bad magic (not a volume image)".into()));
        }
        let version = u32::from_le_bytes(h[8..12].try_into().unwrap());
        if version != VOLUME_VERSION {
            return Err(Error::CorruptImage(format!(
                "unsupported image version {version} (expected {VOLUME_VERSION})"
            )));
        }
        let g = Geometry {
            cluster_bytes: u32::from_le_bytes(h[12..16].try_into().unwrap()),
            page_bytes: u32::from_le_bytes(h[16..20].try_into().unwrap()),
            capacity_bytes: u64::from_le_bytes(h[24..32].try_into().unwrap()),
            metadata_len: u64::from_le_bytes(h[40..48].try_into().unwrap()),
        };
        g.validate().map_err(|e| Error::CorruptImage(format!("bad geometry: {e}")))?;
        let meta_off = u64::from_le_bytes(h[32..40].try_into().unwrap());
        let data_off = u64::from_le_bytes(h[48..56].try_into().unwrap());
        let data_len = u64::from_le_bytes(h[56..64].try_into().unwrap());
        if meta_off != g.metadata_offset() || data_off != g.data_offset() || data_len != g.data_len() {
            return Err(Error::CorruptImage("inconsistent region offsets in header".into()));
        }
        Ok(g)
    }
}

enum Backing {
    Memory(Vec<u8>),
    File(File),
}

pub struct VolumeImage {
    backing: Backing,
    geom: Geometry,
}

impl VolumeImage {
    pub fn create_in_memory(geom: Geometry) -> Result<Self> {
        geom.validate()?;
        let mut img = VolumeImage {
            backing: Backing::Memory(vec![0u8; geom.capacity_bytes as usize]),
            geom,
        };
        img.write_at(0, &geom.encode())?;
        Ok(img)
    }

    pub fn create_file(path: &Path, geom: Geometry) -> Result<Self> {
        geom.validate()?;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len(geom.capacity_bytes)?;
        let mut img = VolumeImage { backing: Backing::File(file), geom };
        img.write_at(0, &geom.encode())?;
        Ok(img)
    }

    pub fn open_file(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut header = [0u8; 64];
        read_exact_at(&file, 0, &mut header)?;
        let geom = Geometry::decode(&header)?;
        let actual = file.metadata()?.len();
        if actual != geom.capacity_bytes {
            return Err(Error::CorruptImage(format!(
                "file is {actual} bytes but header claims {}",
                geom.capacity_bytes
            )));
        }
        Ok(VolumeImage { backing: Backing::File(file), geom })
    }

    /// Open an existing image read-only (scans of images another process owns).
    pub fn open_file_readonly(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().read(true).open(path)?;
        let mut header = [0u8; 64];
        read_exact_at(&file, 0, &mut header)?;
        let geom = Geometry::decode(&header)?;
        Ok(VolumeImage { backing: Backing::File(file), geom })
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.check(offset, buf.len() as u64)?;
        match &self.backing {
            Backing::Memory(m) => {
                buf.copy_from_slice(&m[offset as usize..offset as usize + buf.len()]);
                Ok(())
            }
            Backing::File(f) => read_exact_at(f, offset, buf),
        }
    }

    pub fn write_at(&mut self, offset: u64, bytes: &[u8]) -> Result<()> {
        self.check(offset, bytes.len() as u64)?;
        match &mut self.backing {
            Backing::Memory(m) => {
                m[offset as usize..offset as usize + bytes.len()].copy_from_slice(bytes);
                Ok(())
            }
            Backing::File(f) => write_all_at(f, offset, bytes),
        }
    }

    /// Read from the data region (`offset` relative to its start).
    pub fn read_data(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.check_data(offset, buf.len() as u64)?;
        self.read_at(self.geom.data_offset() + offset, buf)
    }

    /// Write into the data region (`offset` relative to its start).
    pub fn write_data(&mut self, offset: u64, bytes: &[u8]) -> Result<()> {
        self.check_data(offset, bytes.len() as u64)?;
        self.write_at(self.geom.data_offset() + offset, bytes)
    }

    /// Zero a data-region range (used when relocating blobs so stale copies
    /// don't survive into later raw scans).
    pub fn zero_data(&mut self, offset: u64, len: u64) -> Result<()> {
        self.check_data(offset, len)?;
        let zeros = vec![0u8; (1 << 20).min(len as usize)];
        let mut done = 0u64;
        while done < len {
            let step = zeros.len().min((len - done) as usize);
            self.write_data(offset + done, &zeros[..step])?;
            done += step as u64;
        }
        Ok(())
    }

    pub fn read_metadata(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.check_meta(offset, buf.len() as u64)?;
        self.read_at(self.geom.metadata_offset() + offset, buf)
    }

    pub fn write_metadata(&mut self, offset: u64, bytes: &[u8]) -> Result<()> {
        self.check_meta(offset, bytes.len() as u64)?;
        self.write_at(self.geom.metadata_offset() + offset, bytes)
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Backing::File(f) = &self.backing {
            f.sync_all()?;
        }
        Ok(())
    }

    fn check(&self, offset: u64, len: u64) -> Result<()> {
        if offset.checked_add(len).is_none_or(|end| end > self.geom.capacity_bytes) {
            return Err(Error::Invariant(format!(
                "image access [{offset}, +{len}) out of bounds (capacity {})",
                self.geom.capacity_bytes
            )));
        }
        Ok(())
    }

    fn check_data(&self, offset: u64, len: u64) -> Result<()> {
        if offset.checked_add(len).is_none_or(|end| end > self.geom.data_len()) {
            return Err(Error::Invariant(format!(
                "data access [{offset}, +{len}) out of bounds (data region {})",
                self.geom.data_len()
            )));
        }
        Ok(())
    }

    fn check_meta(&self, offset: u64, len: u64) -> Result<()> {
        if offset.checked_add(len).is_none_or(|end| end > self.geom.metadata_len) {
            return Err(Error::Invariant(format!(
                "metadata access [{offset}, +{len}) out of bounds (region {})",
                self.geom.metadata_len
            )));
        }
        Ok(())
    }
}

#[cfg(unix)]
fn read_exact_at(f: &File, offset: u64, buf: &mut [u8]) -> Result<()> {
    use std::os::unix::fs::FileExt;
    f.read_exact_at(buf, offset)?;
    Ok(())
}

#[cfg(unix)]
fn write_all_at(f: &File, offset: u64, bytes: &[u8]) -> Result<()> {
    use std::os::unix::fs::FileExt;
    f.write_all_at(bytes, offset)?;
    Ok(())
}

#[cfg(not(unix))]
fn read_exact_at(f: &File, offset: u64, buf: &mut [u8]) -> Result<()> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = f;
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(buf)?;
    Ok(())
}

#[cfg(not(unix))]
fn write_all_at(f: &File, offset: u64, bytes: &[u8]) -> Result<()> {
    use std::io::{Seek, SeekFrom, Write};
    let mut f = f;
    f.seek(SeekFrom::Start(offset))?;
    f.write_all(bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_regions_tile_capacity() {
        let g = Geometry::with_capacity(64 << 20);
        g.validate().unwrap();
        assert_eq!(g.metadata_offset(), HEADER_LEN);
        assert_eq!(g.data_offset() + g.data_len(), g.capacity_bytes);
        assert_eq!(g.data_len() % g.align(), 0);
        assert!(g.metadata_len >= 256 * 1024);
    }

    #[test]
    fn bad_geometry_rejected() {
        assert!(Geometry::new(64 << 20, 4096, 8192, 1234).validate().is_err());
        assert!(Geometry::new((64 << 20) + 4096, 4096, 8192, 0).validate().is_err());
        assert!(Geometry::new(64 << 20, 3000, 8192, 0).validate().is_err());
        assert!(Geometry::new(320 << 10, 4096, 8192, 0).validate().is_err()); // no data region left
    }

    #[test]
    fn memory_image_bounds_checked() {
        let mut img = VolumeImage::create_in_memory(Geometry::with_capacity(16 << 20)).unwrap();
        let data_len = img.geometry().data_len();
        img.write_data(data_len - 4, b"tail").unwrap();
        let mut buf = [0u8; 4];
        img.read_data(data_len - 4, &mut buf).unwrap();
        assert_eq!(&buf, b"tail");
        assert!(img.write_data(data_len - 3, b"tail").is_err());
        assert!(img.read_metadata(img.geometry().metadata_len, &mut buf).is_err());
    }

    #[test]
    fn file_image_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.img");
        let geom = Geometry::with_capacity(16 << 20);
        {
            let mut img = VolumeImage::create_file(&path, geom).unwrap();
            img.write_data(8192, b"hello").unwrap();
            img.flush().unwrap();
        }
        let img = VolumeImage::open_file(&path).unwrap();
        assert_eq!(img.geometry(), geom);
        let mut buf = [0u8; 5];
        img.read_data(8192, &mut buf).unwrap();
        assert_eq!(&buf, b"hello");
    }

    #[test]
    fn open_rejects_truncated_or_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_volume");
        std::fs::write(&path, vec![0u8; 128]).unwrap();
        assert!(matches!(VolumeImage::open_file(&path), Err(Error::CorruptImage(_))));

        let vol = dir.path().join("short.img");
        let geom = Geometry::with_capacity(16 << 20);
        VolumeImage::create_file(&vol, geom).unwrap();
        let f = OpenOptions::new().write(true).open(&vol).unwrap();
        f.set_len(1 << 20).unwrap();
        drop(f);
        assert!(matches!(VolumeImage::open_file(&vol), Err(Error::CorruptImage(_))));
    }
}
