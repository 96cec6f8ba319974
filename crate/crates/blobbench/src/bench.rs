//! Bench driver: executes a seeded operation stream against a chosen
//! backend, measures write/read throughput per phase, scans fragmentation at
//! every measurement age, and writes the per-cell results directory.
//!
//! Throughput figures in the CSVs come from a modeled device (sequential
//! transfer rate plus a per-seek penalty) driven by deterministic byte and
//! seek counts, so reruns with the same config and seed are byte-identical.
//! Wall-clock times are real but live in a separate file that makes no
//! determinism promise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::{ExperimentConfig, ScanMode};
use crate::error::{Error, Result};
use crate::extent_store::{ExtentConfig, ExtentStore};
use crate::fs_store::{FsConfig, FsStore, FsyncPolicy};
use crate::marker::{make_payload, parse_marker, MARKER_INTERVAL, MARKER_LEN};
use crate::page_store::{PageConfig, PageStore};
use crate::scanner::{
    live_list_to_csv, report_from_ground_truth, scan_image, validate_reports, FragReport,
    LiveObject, DEFAULT_GAP_ALLOWANCE,
};
use crate::store::{BackendKind, BlobStore, ObjectId, Placement};
use crate::volume::{Geometry, VolumeImage};
use crate::workload::{build_stream, Event, PhaseKind, SizeDist, WorkloadSpec};

pub const PHASES_CSV_SCHEMA: &str = "phases-v1";
pub const SUMMARY_SCHEMA: &str = "summary-v1";
/// Images at or under this capacity live in memory; larger ones go to disk.
const MEM_IMAGE_LIMIT: u64 = 2 << 30;
/// Free-pool advisory threshold, in objects.
pub const FREE_POOL_ADVISORY: u64 = 400;

#[derive(Debug, Clone, Copy)]
pub struct DeviceModel {
    pub seek_ms: f64,
    pub transfer_mb_s: f64,
}

impl DeviceModel {
    pub fn seconds(&self, bytes: u64, seeks: u64) -> f64 {
        bytes as f64 / (self.transfer_mb_s * 1e6) + seeks as f64 * (self.seek_ms / 1e3)
    }

    pub fn mb_s(&self, bytes: u64, seeks: u64) -> f64 {
        let t = self.seconds(bytes, seeks);
        if t == 0.0 {
            0.0
        } else {
            bytes as f64 / 1e6 / t
        }
    }
}

/// The three backends behind one dispatch point.
pub enum AnyStore {
    Fs(FsStore),
    Extent(ExtentStore),
    Page(PageStore),
}

impl AnyStore {
    pub fn as_store(&mut self) -> &mut dyn BlobStore {
        match self {
            AnyStore::Fs(s) => s,
            AnyStore::Extent(s) => s,
            AnyStore::Page(s) => s,
        }
    }

    pub fn as_store_ref(&self) -> &dyn BlobStore {
        match self {
            AnyStore::Fs(s) => s,
            AnyStore::Extent(s) => s,
            AnyStore::Page(s) => s,
        }
    }

    pub fn image(&self) -> Option<&VolumeImage> {
        match self {
            AnyStore::Fs(_) => None,
            AnyStore::Extent(s) => Some(s.image()),
            AnyStore::Page(s) => Some(s.image()),
        }
    }

    /// End-of-phase bookkeeping: page store checkpoints (snapshot table,
    /// truncate log); extent store commits deferred frees (idle-time log
    /// flush); plain files need nothing.
    pub fn phase_boundary(&mut self) -> Result<()> {
        match self {
            AnyStore::Page(s) => s.checkpoint()?,
            AnyStore::Extent(s) => s.commit_frees()?,
            AnyStore::Fs(_) => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct PhaseRow {
    pub phase: String,
    pub age: f64,
    pub ops: u64,
    pub bytes_moved: u64,
    pub seeks: u64,
    pub modeled_seconds: f64,
    pub modeled_mb_s: f64,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct AgePoint {
    pub age: f64,
    pub age_label: String,
    pub mean_fragments: f64,
    pub fragments_per_64kb: f64,
    pub stale_markers: u64,
    /// Objects whose scanner count disagreed with ground truth (only
    /// populated when both sides ran).
    pub scan_truth_diffs: u64,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct CellSummary {
    pub schema: String,
    pub cell: String,
    pub backend: String,
    pub size_dist: String,
    pub mean_object_bytes: u64,
    pub seed: u64,
    pub stream_digest: String,
    pub capacity_bytes: u64,
    pub target_occupancy: f64,
    pub live_objects_after_bulk: u64,
    pub free_pool_after_bulk: u64,
    pub advisories: Vec<String>,
    pub age_points: Vec<AgePoint>,
    pub failed: Option<String>,
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub allocator_requests: u64,
    pub internal_frag_bytes: u64,
    pub wal_bytes: u64,
    pub checkpoints: u64,
    /// Ground-truth-only fragmentation on the fs backend is informational.
    pub fragmentation_informational: bool,
}

pub struct CellResult {
    pub summary: CellSummary,
    pub phases: Vec<PhaseRow>,
    pub frag_reports: Vec<FragReport>,
    pub wall_seconds: Vec<(String, f64)>,
}

pub fn fmt_age(a: f64) -> String {
    if a == a.trunc() {
        format!("{}", a as i64)
    } else {
        format!("{a}").replace('.', "p")
    }
}

fn phases_to_csv(rows: &[PhaseRow]) -> String {
    let mut out = String::new();
    writeln!(out, "# schema: {PHASES_CSV_SCHEMA}").unwrap();
    writeln!(out, "phase,age,ops,bytes_moved,seeks,modeled_seconds,modeled_mb_s").unwrap();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.3}",
            r.phase, r.age, r.ops, r.bytes_moved, r.seeks, r.modeled_seconds, r.modeled_mb_s
        )
        .unwrap();
    }
    out
}

/// Driver state for one cell.
struct Driver {
    store: AnyStore,
    live: BTreeMap<ObjectId, (u64, u64)>, // id -> (tag, size)
    buffer: usize,
    payload_seed: u64,
}

impl Driver {
    fn live_list(&self) -> Vec<LiveObject> {
        self.live
            .iter()
            .map(|(&id, &(tag, size))| LiveObject { id, tag, size })
            .collect()
    }

    /// Returns (bytes_written, seeks).
    fn exec_write(&mut self, id: ObjectId, size: u64, tag: u64) -> Result<(u64, u64)> {
        let payload = make_payload(tag, size, self.payload_seed)?;
        let rec = self.store.as_store().put(id, &mut Cursor::new(payload), self.buffer)?;
        let seeks = match &rec.placement {
            Placement::Extents(v) if v.is_empty() => 1, // fs backend: opaque placement
            p => p.fragment_count(),
        };
        self.live.insert(id, (tag, size));
        Ok((size, seeks))
    }

    fn exec_delete(&mut self, id: ObjectId) -> Result<()> {
        self.store.as_store().delete(id)?;
        self.live.remove(&id);
        Ok(())
    }

    /// Full-object read with marker verification; seek count comes from the
    /// phase-local ground-truth map. Returns (bytes_read, seeks).
    fn exec_read(&mut self, id: ObjectId, truth: &BTreeMap<ObjectId, u64>) -> Result<(u64, u64)> {
        let (tag, size) =
            *self.live.get(&id).ok_or_else(|| Error::Invariant(format!("read of dead id {id}")))?;
        if let AnyStore::Fs(s) = &self.store {
            s.drop_cache(id)?;
        }
        let data = self.store.as_store().get(id)?;
        if data.len() as u64 != size {
            return Err(Error::Invariant(format!(
                "read of {id}: {} bytes, expected {size}",
                data.len()
            )));
        }
        // Marker spot-verification over the whole payload: a mixed or torn
        // object cannot pass.
        for k in 0..size / MARKER_INTERVAL {
            let off = (k * MARKER_INTERVAL) as usize;
            match parse_marker(&data[off..off + MARKER_LEN]) {
                Some((t, s)) if t == tag && s as u64 == k => {}
                _ => {
                    return Err(Error::Invariant(format!(
                        "payload of {id} fails marker check at offset {off}"
                    )))
                }
            }
        }
        let seeks = truth.get(&id).copied().unwrap_or(1).max(1);
        Ok((size, seeks))
    }
}

pub struct CellEnv {
    pub cell_dir: PathBuf,
    pub keep_images: bool,
}

fn build_store(
    cfg: &ExperimentConfig,
    backend: BackendKind,
    env: &CellEnv,
) -> Result<(AnyStore, Vec<PathBuf>)> {
    let mut scratch = Vec::new();
    let geom = Geometry::new(cfg.capacity_bytes, cfg.cluster_bytes, cfg.page_bytes, cfg.metadata_bytes);
    let store = match backend {
        BackendKind::Fs => {
            let root = cfg
                .fs_root
                .clone()
                .unwrap_or_else(|| env.cell_dir.join("objects"));
            if !env.keep_images {
                scratch.push(root.clone());
            }
            AnyStore::Fs(FsStore::open(FsConfig { root, fsync_policy: FsyncPolicy::default() })?)
        }
        BackendKind::Extent => {
            let img = if cfg.capacity_bytes <= MEM_IMAGE_LIMIT && !env.keep_images {
                VolumeImage::create_in_memory(geom)?
            } else {
                let path = env.cell_dir.join("vol.img");
                if !env.keep_images {
                    scratch.push(path.clone());
                }
                VolumeImage::create_file(&path, geom)?
            };
            AnyStore::Extent(ExtentStore::new(img, ExtentConfig { policy: cfg.alloc_policy })?)
        }
        BackendKind::Page => {
            let pc = PageConfig { header_bytes: cfg.page_header_bytes };
            if cfg.capacity_bytes <= MEM_IMAGE_LIMIT && !env.keep_images {
                AnyStore::Page(PageStore::new_memory(VolumeImage::create_in_memory(geom)?, pc)?)
            } else {
                let path = env.cell_dir.join("vol.img");
                let wal = env.cell_dir.join("vol.img.wal");
                if !env.keep_images {
                    scratch.push(path.clone());
                    scratch.push(wal.clone());
                }
                AnyStore::Page(PageStore::create_file_backed(
                    VolumeImage::create_file(&path, geom)?,
                    &wal,
                    pc,
                )?)
            }
        }
    };
    Ok((store, scratch))
}

/// Run one (backend, size distribution) cell and write its results under
/// `env.cell_dir`.
pub fn run_cell(
    cfg: &ExperimentConfig,
    backend: BackendKind,
    dist: &SizeDist,
    env: &CellEnv,
) -> Result<CellResult> {
    fs::create_dir_all(&env.cell_dir)?;
    let spec: WorkloadSpec = cfg.workload_spec(dist)?;
    let stream = build_stream(&spec)?;
    let model = DeviceModel { seek_ms: cfg.seek_ms, transfer_mb_s: cfg.transfer_mb_s };
    let (store, scratch) = build_store(cfg, backend, env)?;
    let mut driver = Driver {
        store,
        live: BTreeMap::new(),
        buffer: cfg.write_buffer_bytes as usize,
        payload_seed: cfg.seed,
    };

    let cell = ExperimentConfig::cell_name(backend, dist);
    let mut phases: Vec<PhaseRow> = Vec::new();
    let mut frag_reports: Vec<FragReport> = Vec::new();
    let mut age_points: Vec<AgePoint> = Vec::new();
    let mut advisories: Vec<String> = Vec::new();
    let mut wall: Vec<(String, f64)> = Vec::new();
    let mut failed: Option<String> = None;
    let mut live_after_bulk = 0u64;
    let mut pool_after_bulk = 0u64;

    'phases: for phase in &stream.phases {
        let label = match phase.kind {
            PhaseKind::BulkLoad => "bulk_load".to_string(),
            PhaseKind::Churn { age_from, age_to } => {
                format!("churn_{}_{}", fmt_age(age_from), fmt_age(age_to))
            }
            PhaseKind::ReadPass { age } => format!("read_pass_{}", fmt_age(age)),
        };
        let start = Instant::now();
        let mut bytes = 0u64;
        let mut seeks = 0u64;
        let mut ops = 0u64;
        match phase.kind {
            PhaseKind::BulkLoad | PhaseKind::Churn { .. } => {
                for ev in &phase.events {
                    let r = match *ev {
                        Event::BulkCreate { id, size, tag }
                        | Event::SafeWrite { id, size, tag }
                        | Event::Create { id, size, tag } => driver.exec_write(id, size, tag),
                        Event::Delete { id } => driver.exec_delete(id).map(|()| (0, 1)),
                        Event::Read { id } => {
                            return Err(Error::Invariant(format!(
                                "read event {id} inside a write phase"
                            )))
                        }
                    };
                    match r {
                        Ok((b, s)) => {
                            bytes += b;
                            seeks += s;
                            ops += 1;
                        }
                        Err(Error::VolumeFull { requested, free }) => {
                            failed = Some(format!(
                                "volume full during {label}: requested {requested} bytes with {free} free; \
                                 occupancy {} too aggressive for this geometry",
                                cfg.target_occupancy
                            ));
                            break 'phases;
                        }
                        Err(e) => return Err(e),
                    }
                }
                driver.store.phase_boundary()?;
                if matches!(phase.kind, PhaseKind::BulkLoad) {
                    live_after_bulk = driver.live.len() as u64;
                    let free = driver.store.as_store_ref().free_bytes();
                    pool_after_bulk = free / dist.mean_bytes().max(1);
                    if pool_after_bulk < FREE_POOL_ADVISORY && backend != BackendKind::Fs {
                        advisories.push(format!(
                            "free pool after bulk load is {pool_after_bulk} objects (< {FREE_POOL_ADVISORY}); \
                             fragmentation results overstate steady-state aging on larger volumes"
                        ));
                    }
                }
            }
            PhaseKind::ReadPass { age } => {
                let truth = driver.store.as_store_ref().ground_truth_fragments();
                for ev in &phase.events {
                    let Event::Read { id } = *ev else {
                        return Err(Error::Invariant("non-read event in read pass".into()));
                    };
                    let (b, s) = driver.exec_read(id, &truth)?;
                    bytes += b;
                    seeks += s;
                    ops += 1;
                }
                // Fragmentation snapshot at this age.
                let age_label = fmt_age(age);
                let live = driver.live_list();
                let (report, diffs) = match (cfg.scan_mode, driver.store.image()) {
                    (ScanMode::GroundTruth, _) | (_, None) => {
                        (report_from_ground_truth(&truth, &live, &age_label)?, 0)
                    }
                    (ScanMode::Marker, Some(img)) => {
                        (scan_image(img, &live, &age_label, DEFAULT_GAP_ALLOWANCE)?, 0)
                    }
                    (ScanMode::Both, Some(img)) => {
                        let scanned = scan_image(img, &live, &age_label, DEFAULT_GAP_ALLOWANCE)?;
                        let oracle = report_from_ground_truth(&truth, &live, &age_label)?;
                        let diffs = validate_reports(&scanned, &oracle)?.len() as u64;
                        (scanned, diffs)
                    }
                };
                age_points.push(AgePoint {
                    age,
                    age_label: age_label.clone(),
                    mean_fragments: report.mean_fragments().unwrap_or(0.0),
                    fragments_per_64kb: report.fragments_per_64kb().unwrap_or(0.0),
                    stale_markers: report.stale_markers,
                    scan_truth_diffs: diffs,
                });
                frag_reports.push(report);
            }
        }
        phases.push(PhaseRow {
            phase: label.clone(),
            age: phase.achieved_age,
            ops,
            bytes_moved: bytes,
            seeks,
            modeled_seconds: model.seconds(bytes, seeks),
            modeled_mb_s: model.mb_s(bytes, seeks),
        });
        wall.push((label, start.elapsed().as_secs_f64()));
    }

    let stats = driver.store.as_store_ref().stats();
    let summary = CellSummary {
        schema: SUMMARY_SCHEMA.to_string(),
        cell: cell.clone(),
        backend: backend.to_string(),
        size_dist: dist.label().to_string(),
        mean_object_bytes: dist.mean_bytes(),
        seed: cfg.seed,
        stream_digest: stream.digest_hex(),
        capacity_bytes: cfg.capacity_bytes,
        target_occupancy: cfg.target_occupancy,
        live_objects_after_bulk: live_after_bulk,
        free_pool_after_bulk: pool_after_bulk,
        advisories,
        age_points,
        failed,
        bytes_written: stats.bytes_written,
        bytes_read: stats.bytes_read,
        allocator_requests: stats.allocator_requests,
        internal_frag_bytes: stats.internal_frag_bytes,
        wal_bytes: stats.wal_bytes,
        checkpoints: stats.checkpoints,
        fragmentation_informational: backend == BackendKind::Fs,
    };

    // Persist the cell directory.
    fs::write(env.cell_dir.join("phases.csv"), phases_to_csv(&phases))?;
    for report in &frag_reports {
        fs::write(
            env.cell_dir.join(format!("frag_age{}.csv", report.age_label)),
            report.to_csv(),
        )?;
    }
    fs::write(
        env.cell_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Report(e.to_string()))? + "\n",
    )?;
    let wall_json: Vec<serde_json::Value> = wall
        .iter()
        .map(|(p, s)| serde_json::json!({"phase": p, "wall_seconds": s}))
        .collect();
    fs::write(
        env.cell_dir.join("wall_times.json"),
        serde_json::to_string_pretty(&wall_json).map_err(|e| Error::Report(e.to_string()))? + "\n",
    )?;

    // Image retention: keep a scannable artifact plus its live list, or
    // scrub scratch files.
    if env.keep_images {
        fs::write(env.cell_dir.join("live.csv"), live_list_to_csv(&driver.live_list()))?;
        match driver.store {
            AnyStore::Extent(s) => {
                s.close()?;
            }
            AnyStore::Page(s) => {
                s.close()?;
            }
            AnyStore::Fs(_) => {}
        }
    } else {
        match driver.store {
            AnyStore::Extent(s) => drop(s.close()?),
            AnyStore::Page(s) => drop(s.close()?),
            AnyStore::Fs(_) => {}
        }
        for p in scratch {
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.exists() {
                fs::remove_file(&p)?;
            }
        }
    }

    Ok(CellResult { summary, phases, frag_reports, wall_seconds: wall })
}

/// Run every cell of the config matrix under `out_root`. Returns summaries
/// in cell order; a failed cell (volume full) is recorded, not fatal.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path) -> Result<Vec<CellSummary>> {
    fs::create_dir_all(out_root)?;
    fs::write(out_root.join("config.echo"), cfg.to_text())?;
    let mut out = Vec::new();
    for (backend, dist) in cfg.cells() {
        let cell = ExperimentConfig::cell_name(backend, &dist);
        let env = CellEnv { cell_dir: out_root.join(&cell), keep_images: cfg.keep_images };
        let result = run_cell(cfg, backend, &dist, &env)?;
        out.push(result.summary);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            capacity_bytes: 64 << 20,
            size_dists: vec![SizeDist::Constant { bytes: 512 * 1024 }],
            measurement_ages: vec![0.0, 1.0],
            read_sample_count: 20,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn cell_produces_complete_results_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let dist = cfg.size_dists[0];
        let env = CellEnv { cell_dir: dir.path().join("cell"), keep_images: false };
        let result = run_cell(&cfg, BackendKind::Extent, &dist, &env).unwrap();
        assert!(result.summary.failed.is_none());
        assert_eq!(result.summary.age_points.len(), 2);
        assert_eq!(result.summary.age_points[0].mean_fragments, 1.0);
        assert_eq!(result.summary.age_points[0].scan_truth_diffs, 0);
        assert_eq!(result.summary.age_points[1].scan_truth_diffs, 0);
        assert!(env.cell_dir.join("phases.csv").is_file());
        assert!(env.cell_dir.join("frag_age0.csv").is_file());
        assert!(env.cell_dir.join("frag_age1.csv").is_file());
        assert!(env.cell_dir.join("summary.json").is_file());
        assert!(env.cell_dir.join("wall_times.json").is_file());
        // Scratch image removed.
        assert!(!env.cell_dir.join("vol.img").exists());
    }

    #[test]
    fn rerun_is_byte_identical_modulo_wall_times() {
        let cfg = small_cfg();
        let dist = cfg.size_dists[0];
        let mut snapshots = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let env = CellEnv { cell_dir: dir.path().join("cell"), keep_images: false };
            run_cell(&cfg, BackendKind::Page, &dist, &env).unwrap();
            let mut files = BTreeMap::new();
            for entry in fs::read_dir(&env.cell_dir).unwrap() {
                let p = entry.unwrap().path();
                let name = p.file_name().unwrap().to_string_lossy().to_string();
                if name != "wall_times.json" {
                    files.insert(name, fs::read(&p).unwrap());
                }
            }
            snapshots.push(files);
        }
        assert_eq!(snapshots[0], snapshots[1]);
    }

    #[test]
    fn fs_cell_runs_with_ground_truth_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            capacity_bytes: 16 << 20,
            size_dists: vec![SizeDist::Constant { bytes: 128 * 1024 }],
            measurement_ages: vec![0.0, 1.0],
            read_sample_count: 10,
            ..ExperimentConfig::default()
        };
        let dist = cfg.size_dists[0];
        let env = CellEnv { cell_dir: dir.path().join("cell"), keep_images: false };
        let result = run_cell(&cfg, BackendKind::Fs, &dist, &env).unwrap();
        assert!(result.summary.fragmentation_informational);
        assert_eq!(result.summary.age_points[1].mean_fragments, 1.0);
        // Object scratch dir cleaned up.
        assert!(!env.cell_dir.join("objects").exists());
    }

    #[test]
    fn volume_full_marks_cell_failed() {
        let dir = tempfile::tempdir().unwrap();
        // Tiny image with occupancy so high churn overwrites cannot stage
        // new copies: 3x4MB live + 4MB staged > ~15.7MB data region.
        let cfg = ExperimentConfig {
            capacity_bytes: 16 << 20,
            size_dists: vec![SizeDist::Constant { bytes: 4 << 20 }],
            target_occupancy: 0.9,
            measurement_ages: vec![0.0, 2.0],
            read_sample_count: 5,
            ..ExperimentConfig::default()
        };
        let dist = cfg.size_dists[0];
        let env = CellEnv { cell_dir: dir.path().join("cell"), keep_images: false };
        let result = run_cell(&cfg, BackendKind::Extent, &dist, &env).unwrap();
        let failed = result.summary.failed.expect("cell must fail");
        assert!(failed.contains("volume full"), "{failed}");
        assert!(env.cell_dir.join("summary.json").is_file());
    }

    #[test]
    fn keep_images_leaves_scannable_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { keep_images: true, ..small_cfg() };
        let dist = cfg.size_dists[0];
        let env = CellEnv { cell_dir: dir.path().join("cell"), keep_images: true };
        run_cell(&cfg, BackendKind::Extent, &dist, &env).unwrap();
        let img_path = env.cell_dir.join("vol.img");
        assert!(img_path.is_file());
        let live = crate::scanner::live_list_from_csv(
            &fs::read_to_string(env.cell_dir.join("live.csv")).unwrap(),
        )
        .unwrap();
        let img = VolumeImage::open_file_readonly(&img_path).unwrap();
        let report = scan_image(&img, &live, "post", DEFAULT_GAP_ALLOWANCE).unwrap();
        assert!(!report.is_empty());
        let persisted = FragReport::from_csv(
            &fs::read_to_string(env.cell_dir.join("frag_age1.csv")).unwrap(),
        )
        .unwrap();
        // The kept image matches the final measurement snapshot.
        for (a, b) in report.objects.iter().zip(&persisted.objects) {
            assert_eq!((a.id, a.fragments), (b.id, b.fragments));
        }
    }
}
