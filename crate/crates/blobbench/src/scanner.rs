//! Raw-image fragmentation scanner. Slides over a volume's data region at
//! byte granularity, recovers payload markers (magic + CRC gate), and counts
//! physical fragments per object without consulting any backend metadata.
//!
//! The one permitted metadata input is the driver's live list, which maps
//! each live object to its current payload tag — that is how stale copies of
//! overwritten or deleted generations, still sitting in unallocated space,
//! are kept out of the counts.
//!
//! Fragment rule: markers of one object, sorted by sequence, are contiguous
//! when each consecutive pair is separated by [1024, 1024 + gap_allowance]
//! image bytes. The default allowance of 512 absorbs page headers (96 bytes)
//! but not a skipped cluster (4096) or page (8192), which makes the count
//! exact — not approximate — on the simulated backends. Reordered physical
//! placement gives a negative or oversized delta and counts as a break.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::marker::{parse_marker, MARKER_INTERVAL, MARKER_LEN, MARKER_MAGIC};
use crate::store::ObjectId;
use crate::volume::VolumeImage;

pub const DEFAULT_GAP_ALLOWANCE: u64 = 512;
pub const FRAG_CSV_SCHEMA: &str = "fragreport-v1";
const SCAN_CHUNK: usize = 8 << 20;

/// One live object as the driver knows it: store id, the tag embedded in its
/// current payload generation, and its exact size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiveObject {
    pub id: ObjectId,
    pub tag: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectFrag {
    pub id: ObjectId,
    pub expected_markers: u64,
    pub recovered_markers: u64,
    pub fragments: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragReport {
    /// Storage-age label for the snapshot this report describes (e.g. "2").
    pub age_label: String,
    /// Per-object rows, ordered by object id.
    pub objects: Vec<ObjectFrag>,
    /// Markers whose tag matched no live object (old generations).
    pub stale_markers: u64,
    /// Magic matches that failed the CRC gate (random filler collisions
    /// cannot survive it; nonzero values indicate image damage).
    pub candidates_rejected: u64,
}

impl FragReport {
    pub fn is_empty(&self) -> bool {
        self.objects.iter().all(|o| o.recovered_markers == 0)
    }

    pub fn total_fragments(&self) -> u64 {
        self.objects.iter().map(|o| o.fragments).sum()
    }

    pub fn mean_fragments(&self) -> Option<f64> {
        if self.objects.is_empty() {
            return None;
        }
        Some(self.total_fragments() as f64 / self.objects.len() as f64)
    }

    /// Fragments per 64KB of live payload — size-normalized fragmentation.
    pub fn fragments_per_64kb(&self) -> Option<f64> {
        let bytes: u64 = self.objects.iter().map(|o| o.expected_markers * MARKER_INTERVAL).sum();
        if bytes == 0 {
            return None;
        }
        Some(self.total_fragments() as f64 / (bytes as f64 / 65536.0))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# schema: {FRAG_CSV_SCHEMA}").unwrap();
        writeln!(out, "# age: {}", self.age_label).unwrap();
        writeln!(out, "# stale_markers: {}", self.stale_markers).unwrap();
        writeln!(out, "# candidates_rejected: {}", self.candidates_rejected).unwrap();
        writeln!(out, "object_id,expected_markers,recovered_markers,fragments").unwrap();
        for o in &self.objects {
            writeln!(
                out,
                "{},{},{},{}",
                o.id, o.expected_markers, o.recovered_markers, o.fragments
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<FragReport> {
        let mut lines = text.lines();
        let first = lines.next().unwrap_or("");
        let schema = first.strip_prefix("# schema: ").unwrap_or("");
        if schema != FRAG_CSV_SCHEMA {
            return Err(Error::Report(format!(
                "fragment CSV schema {schema:?} not supported (want {FRAG_CSV_SCHEMA})"
            )));
        }
        let mut report = FragReport {
            age_label: String::new(),
            objects: Vec::new(),
            stale_markers: 0,
            candidates_rejected: 0,
        };
        for line in lines {
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some((k, v)) = rest.split_once(": ") {
                    match k {
                        "age" => report.age_label = v.to_string(),
                        "stale_markers" => {
                            report.stale_markers =
                                v.parse().map_err(|_| Error::Report(format!("bad count {v}")))?
                        }
                        "candidates_rejected" => {
                            report.candidates_rejected =
                                v.parse().map_err(|_| Error::Report(format!("bad count {v}")))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if line.starts_with("object_id") || line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let mut next = || {
                cols.next().ok_or_else(|| Error::Report(format!("short fragment row: {line}")))
            };
            let id: ObjectId =
                next()?.parse().map_err(|e| Error::Report(format!("bad object id: {e}")))?;
            let nums: std::result::Result<Vec<u64>, _> =
                (0..3).map(|_| next().and_then(|c| c.parse().map_err(|_| Error::Report(format!("bad number in row: {line}"))))).collect();
            let nums = nums?;
            report.objects.push(ObjectFrag {
                id,
                expected_markers: nums[0],
                recovered_markers: nums[1],
                fragments: nums[2],
            });
        }
        Ok(report)
    }
}

/// Scan the whole data region of `img`, keeping only markers whose tag
/// appears in `live`.
pub fn scan_image(
    img: &VolumeImage,
    live: &[LiveObject],
    age_label: &str,
    gap_allowance: u64,
) -> Result<FragReport> {
    let by_tag: BTreeMap<u64, LiveObject> = live.iter().map(|o| (o.tag, *o)).collect();
    if by_tag.len() != live.len() {
        return Err(Error::Config("live list has duplicate payload tags".into()));
    }
    let mut hits: BTreeMap<u64, Vec<(u32, u64)>> = BTreeMap::new(); // tag -> (seq, offset)
    let mut stale = 0u64;
    let mut rejected = 0u64;

    let total = img.geometry().data_len();
    let mut buf = vec![0u8; SCAN_CHUNK.min(total as usize).max(MARKER_LEN)];
    let mut base = 0u64;
    while base < total {
        let want = buf.len().min((total - base) as usize);
        let chunk = &mut buf[..want];
        img.read_data(base, chunk)?;
        let last_start = want.saturating_sub(MARKER_LEN);
        for i in memchr::memchr_iter(MARKER_MAGIC[0], &chunk[..want]) {
            if i > last_start {
                break;
            }
            if chunk[i..i + 8] != MARKER_MAGIC {
                continue;
            }
            match parse_marker(&chunk[i..i + MARKER_LEN]) {
                Some((tag, seq)) => {
                    if by_tag.contains_key(&tag) {
                        hits.entry(tag).or_default().push((seq, base + i as u64));
                    } else {
                        stale += 1;
                    }
                }
                None => rejected += 1,
            }
        }
        if base + want as u64 >= total {
            break;
        }
        // Re-read the trailing window so a marker straddling the chunk edge
        // is seen whole next round.
        base += (want - (MARKER_LEN - 1)) as u64;
    }

    let mut objects = Vec::with_capacity(live.len());
    for obj in live {
        let expected = obj.size / MARKER_INTERVAL;
        let mut found = hits.remove(&obj.tag).unwrap_or_default();
        found.sort_unstable();
        let recovered = found.len() as u64;
        let fragments = if found.is_empty() {
            0
        } else {
            let mut breaks = 0u64;
            for pair in found.windows(2) {
                let (seq_a, off_a) = pair[0];
                let (seq_b, off_b) = pair[1];
                let contiguous = seq_b == seq_a + 1
                    && off_b > off_a
                    && (MARKER_INTERVAL..=MARKER_INTERVAL + gap_allowance)
                        .contains(&(off_b - off_a));
                if !contiguous {
                    breaks += 1;
                }
            }
            breaks + 1
        };
        objects.push(ObjectFrag { id: obj.id, expected_markers: expected, recovered_markers: recovered, fragments });
    }
    objects.sort_by_key(|o| o.id);
    Ok(FragReport {
        age_label: age_label.to_string(),
        objects,
        stale_markers: stale,
        candidates_rejected: rejected,
    })
}

/// Build the same report shape from allocator ground truth (used for oracle
/// comparison, and as the only fragmentation source on the real-fs backend,
/// where it is informational).
pub fn report_from_ground_truth(
    counts: &BTreeMap<ObjectId, u64>,
    live: &[LiveObject],
    age_label: &str,
) -> Result<FragReport> {
    let mut objects = Vec::with_capacity(live.len());
    for obj in live {
        let fragments = *counts
            .get(&obj.id)
            .ok_or_else(|| Error::Report(format!("ground truth missing object {}", obj.id)))?;
        let expected = obj.size / MARKER_INTERVAL;
        objects.push(ObjectFrag {
            id: obj.id,
            expected_markers: expected,
            recovered_markers: expected,
            fragments,
        });
    }
    objects.sort_by_key(|o| o.id);
    Ok(FragReport {
        age_label: age_label.to_string(),
        objects,
        stale_markers: 0,
        candidates_rejected: 0,
    })
}

pub const LIVE_CSV_SCHEMA: &str = "livelist-v1";

/// Serialize a live list so a standalone scan can filter stale copies later.
pub fn live_list_to_csv(live: &[LiveObject]) -> String {
    let mut out = String::new();
    writeln!(out, "# schema: {LIVE_CSV_SCHEMA}").unwrap();
    writeln!(out, "object_id,tag,size").unwrap();
    for o in live {
        writeln!(out, "{},{},{}", o.id, o.tag, o.size).unwrap();
    }
    out
}

pub fn live_list_from_csv(text: &str) -> Result<Vec<LiveObject>> {
    let mut lines = text.lines();
    let schema = lines.next().unwrap_or("").strip_prefix("# schema: ").unwrap_or("");
    if schema != LIVE_CSV_SCHEMA {
        return Err(Error::Report(format!(
            "live list schema {schema:?} not supported (want {LIVE_CSV_SCHEMA})"
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.starts_with('#') || line.starts_with("object_id") || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Report(format!("bad live list row: {line}")));
        }
        out.push(LiveObject {
            id: cols[0].parse().map_err(|e| Error::Report(format!("bad object id: {e}")))?,
            tag: cols[1].parse().map_err(|_| Error::Report(format!("bad tag: {line}")))?,
            size: cols[2].parse().map_err(|_| Error::Report(format!("bad size: {line}")))?,
        });
    }
    Ok(out)
}

/// Per-object signed fragment-count differences (`a - b`); empty when the
/// reports agree. Errors when the object sets differ.
pub fn validate_reports(a: &FragReport, b: &FragReport) -> Result<Vec<(ObjectId, i64)>> {
    let ids_a: Vec<ObjectId> = a.objects.iter().map(|o| o.id).collect();
    let ids_b: Vec<ObjectId> = b.objects.iter().map(|o| o.id).collect();
    if ids_a != ids_b {
        return Err(Error::Report(format!(
            "object sets differ: {} vs {} objects",
            ids_a.len(),
            ids_b.len()
        )));
    }
    Ok(a.objects
        .iter()
        .zip(&b.objects)
        .filter(|(x, y)| x.fragments != y.fragments)
        .map(|(x, y)| (x.id, x.fragments as i64 - y.fragments as i64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extent_store::{ExtentConfig, ExtentStore};
    use crate::marker::make_payload;
    use crate::page_store::{PageConfig, PageStore};
    use crate::store::BlobStore;
    use crate::volume::{Geometry, VolumeImage};
    use std::io::Cursor;

    fn live_of(store: &dyn BlobStore, tags: &[(ObjectId, u64)]) -> Vec<LiveObject> {
        tags.iter()
            .map(|&(id, tag)| LiveObject { id, tag, size: store.size_of(id).unwrap() })
            .collect()
    }

    #[test]
    fn contiguous_extent_blob_is_one_fragment() {
        let img = VolumeImage::create_in_memory(Geometry::with_capacity(16 << 20)).unwrap();
        let mut s = ExtentStore::new(img, ExtentConfig::default()).unwrap();
        let data = make_payload(77, 1 << 20, 0).unwrap();
        s.put(ObjectId(1), &mut Cursor::new(data), 65536).unwrap();
        let live = live_of(&s, &[(ObjectId(1), 77)]);
        let report = scan_image(s.image(), &live, "0", DEFAULT_GAP_ALLOWANCE).unwrap();
        assert_eq!(report.objects.len(), 1);
        assert_eq!(report.objects[0].fragments, 1);
        assert_eq!(report.objects[0].recovered_markers, 1024);
        assert_eq!(report.objects[0].expected_markers, 1024);
        assert_eq!(report.candidates_rejected, 0);
    }

    #[test]
    fn page_chain_headers_absorbed_by_allowance() {
        let img = VolumeImage::create_in_memory(Geometry::with_capacity(16 << 20)).unwrap();
        let mut s = PageStore::new_memory(img, PageConfig::default()).unwrap();
        let data = make_payload(5, 256 * 1024, 0).unwrap();
        s.put(ObjectId(9), &mut Cursor::new(data), 65536).unwrap();
        let live = live_of(&s, &[(ObjectId(9), 5)]);
        let report = scan_image(s.image(), &live, "0", DEFAULT_GAP_ALLOWANCE).unwrap();
        // 33 consecutive pages, 96-byte headers between payload runs: still
        // one fragment, all 256 markers recovered.
        assert_eq!(report.objects[0].fragments, 1);
        assert_eq!(report.objects[0].recovered_markers, 256);
    }

    #[test]
    fn split_extents_counted_and_stale_copies_filtered() {
        let img = VolumeImage::create_in_memory(Geometry::with_capacity(16 << 20)).unwrap();
        let mut s = ExtentStore::new(img, ExtentConfig::default()).unwrap();
        // Fill interleaved, delete every other one, then write one large
        // object into the scattered holes.
        for i in 0..12u64 {
            let data = make_payload(i, 512 * 1024, 0).unwrap();
            s.put(ObjectId(i), &mut Cursor::new(data), 65536).unwrap();
        }
        for i in (0..12u64).step_by(2) {
            s.delete(ObjectId(i)).unwrap();
        }
        s.commit_frees().unwrap(); // make the holes allocatable
        let data = make_payload(100, 2 << 20, 0).unwrap();
        s.put(ObjectId(100), &mut Cursor::new(data), 65536).unwrap();
        let truth = s.ground_truth_fragments();
        assert!(truth[&ObjectId(100)] > 1, "hole-filling must fragment");
        let mut tags: Vec<(ObjectId, u64)> = (1..12).step_by(2).map(|i| (ObjectId(i), i)).collect();
        tags.push((ObjectId(100), 100));
        let live = live_of(&s, &tags);
        let report = scan_image(s.image(), &live, "0", DEFAULT_GAP_ALLOWANCE).unwrap();
        // Deleted objects' markers still sit in free space: filtered as stale.
        assert!(report.stale_markers > 0);
        let oracle = report_from_ground_truth(&truth, &live, "0").unwrap();
        assert_eq!(validate_reports(&report, &oracle).unwrap(), vec![]);
    }

    #[test]
    fn reordered_adjacent_placement_counts_as_fragmented() {
        let mut img = VolumeImage::create_in_memory(Geometry::with_capacity(1 << 20)).unwrap();
        let data = make_payload(8, 2048, 0).unwrap();
        // Second kilobyte physically first: adjacent but reordered.
        img.write_data(0, &data[1024..]).unwrap();
        img.write_data(4096, &data[..1024]).unwrap();
        let live = [LiveObject { id: ObjectId(1), tag: 8, size: 2048 }];
        let report = scan_image(&img, &live, "0", DEFAULT_GAP_ALLOWANCE).unwrap();
        assert_eq!(report.objects[0].fragments, 2);
        assert_eq!(report.objects[0].recovered_markers, 2);
    }

    #[test]
    fn empty_image_yields_empty_report() {
        let img = VolumeImage::create_in_memory(Geometry::with_capacity(1 << 20)).unwrap();
        let live = [LiveObject { id: ObjectId(1), tag: 1, size: 4096 }];
        let report = scan_image(&img, &live, "0", DEFAULT_GAP_ALLOWANCE).unwrap();
        assert!(report.is_empty());
        assert_eq!(report.objects[0].recovered_markers, 0);
        assert_eq!(report.objects[0].fragments, 0);
    }

    #[test]
    fn markers_straddling_scan_chunks_are_recovered() {
        // Place a marker across the 8MiB chunk boundary by positioning the
        // payload so offset (8MiB - 10) starts a marker.
        let img_len = 9 << 20;
        let mut img = VolumeImage::create_in_memory(Geometry::with_capacity(img_len)).unwrap();
        let data = make_payload(3, 4096, 0).unwrap();
        let start = (8 << 20) - 10 - 1024; // marker 1 begins 10 bytes before the edge
        img.write_data(start, &data).unwrap();
        let live = [LiveObject { id: ObjectId(2), tag: 3, size: 4096 }];
        let report = scan_image(&img, &live, "0", DEFAULT_GAP_ALLOWANCE).unwrap();
        assert_eq!(report.objects[0].recovered_markers, 4);
        assert_eq!(report.objects[0].fragments, 1);
    }

    #[test]
    fn csv_roundtrip_and_schema_gate() {
        let report = FragReport {
            age_label: "4".into(),
            objects: vec![
                ObjectFrag { id: ObjectId(10), expected_markers: 256, recovered_markers: 256, fragments: 3 },
                ObjectFrag { id: ObjectId(11), expected_markers: 512, recovered_markers: 512, fragments: 1 },
            ],
            stale_markers: 17,
            candidates_rejected: 0,
        };
        let csv = report.to_csv();
        assert_eq!(FragReport::from_csv(&csv).unwrap(), report);
        assert_eq!(report.mean_fragments(), Some(2.0));
        let bad = csv.replace(FRAG_CSV_SCHEMA, "fragreport-v9");
        assert!(matches!(FragReport::from_csv(&bad), Err(Error::Report(_))));
    }

    #[test]
    fn live_list_roundtrip() {
        let live = vec![
            LiveObject { id: ObjectId(3), tag: 900, size: 262144 },
            LiveObject { id: ObjectId(7), tag: 901, size: 1024 },
        ];
        assert_eq!(live_list_from_csv(&live_list_to_csv(&live)).unwrap(), live);
        assert!(live_list_from_csv("# schema: livelist-v9\n").is_err());
    }

    #[test]
    fn validate_flags_single_difference() {
        let mk = |frags| FragReport {
            age_label: "0".into(),
            objects: vec![
                ObjectFrag { id: ObjectId(1), expected_markers: 8, recovered_markers: 8, fragments: 1 },
                ObjectFrag { id: ObjectId(2), expected_markers: 8, recovered_markers: 8, fragments: frags },
            ],
            stale_markers: 0,
            candidates_rejected: 0,
        };
        let a = mk(3);
        let b = mk(2);
        assert_eq!(validate_reports(&a, &a).unwrap(), vec![]);
        assert_eq!(validate_reports(&a, &b).unwrap(), vec![(ObjectId(2), 1)]);
        let short = FragReport { objects: vec![a.objects[0].clone()], ..a.clone() };
        assert!(validate_reports(&a, &short).is_err());
    }
}
