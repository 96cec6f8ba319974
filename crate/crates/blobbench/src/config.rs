//! Experiment configuration: a flat `key = value` file describing a matrix
//! of (backend × size distribution) cells that all share one seed and one
//! volume geometry. Unknown keys are rejected so typos fail loudly.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::extent_store::AllocPolicy;
use crate::store::BackendKind;
use crate::workload::{ChurnMix, SizeDist, WorkloadSpec};

/// What fragmentation evidence each measurement point collects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanMode {
    /// Raw-image marker scan only.
    Marker,
    /// Allocator ground truth only (the only choice with meaning on the real
    /// fs backend).
    GroundTruth,
    /// Both, cross-checked against each other at every measurement point.
    #[default]
    Both,
}

impl ScanMode {
    fn name(&self) -> &'static str {
        match self {
            ScanMode::Marker => "marker",
            ScanMode::GroundTruth => "ground_truth",
            ScanMode::Both => "both",
        }
    }
}

impl FromStr for ScanMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "marker" => Ok(ScanMode::Marker),
            "ground_truth" => Ok(ScanMode::GroundTruth),
            "both" => Ok(ScanMode::Both),
            other => {
                Err(format!("unknown scan_mode {other:?} (expected marker, ground_truth, both)"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backends: Vec<BackendKind>,
    pub size_dists: Vec<SizeDist>,
    pub capacity_bytes: u64,
    pub target_occupancy: f64,
    pub write_buffer_bytes: u64,
    pub measurement_ages: Vec<f64>,
    pub read_sample_count: u64,
    /// Fraction of churn operations done as delete-then-create instead of an
    /// in-place safe write.
    pub churn_delete_create: f64,
    pub cluster_bytes: u32,
    pub page_bytes: u32,
    pub page_header_bytes: u32,
    pub alloc_policy: AllocPolicy,
    pub scan_mode: ScanMode,
    /// Keep volume images next to the results instead of deleting them.
    pub keep_images: bool,
    /// Results root; the CLI may override via flag or BLOBBENCH_RESULTS.
    pub out_dir: Option<PathBuf>,
    /// Directory for fs-backend object files (default: under out_dir).
    pub fs_root: Option<PathBuf>,
    /// Metadata region size; 0 = auto.
    pub metadata_bytes: u64,
    /// Modeled device: seek penalty and sequential transfer rate. These feed
    /// the deterministic throughput figures; wall-clock times are reported
    /// separately and make no determinism promise.
    pub seek_ms: f64,
    pub transfer_mb_s: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            backends: vec![BackendKind::Extent, BackendKind::Page],
            size_dists: vec![SizeDist::Constant { bytes: 256 * 1024 }],
            capacity_bytes: 2 << 30,
            target_occupancy: 0.9,
            write_buffer_bytes: 65536,
            measurement_ages: vec![0.0, 2.0, 4.0],
            read_sample_count: 1000,
            churn_delete_create: 0.0,
            cluster_bytes: 4096,
            page_bytes: 8192,
            page_header_bytes: 96,
            alloc_policy: AllocPolicy::BestFit,
            scan_mode: ScanMode::default(),
            keep_images: false,
            out_dir: None,
            fs_root: None,
            metadata_bytes: 0,
            seek_ms: 8.0,
            transfer_mb_s: 100.0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_size_dist(v: &str) -> Result<SizeDist> {
    let (kind, bytes) = v
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("size_dists entry {v:?} needs kind:bytes")))?;
    let bytes: u64 = parse_num("size_dists", bytes)?;
    match kind {
        "constant" => Ok(SizeDist::Constant { bytes }),
        "uniform" => Ok(SizeDist::UniformAboutMean { mean_bytes: bytes }),
        other => Err(Error::Config(format!(
            "unknown size distribution {other:?} (expected constant or uniform)"
        ))),
    }
}

fn dist_value(d: &SizeDist) -> String {
    match d {
        SizeDist::Constant { bytes } => format!("constant:{bytes}"),
        SizeDist::UniformAboutMean { mean_bytes } => format!("uniform:{mean_bytes}"),
    }
}

fn fmt_age(a: f64) -> String {
    if a == a.trunc() {
        format!("{}", a as u64)
    } else {
        format!("{a}")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            match key {
                "seed" => cfg.seed = parse_num(key, value)?,
                "backends" => {
                    cfg.backends = value
                        .split(',')
                        .map(|s| s.trim().parse().map_err(Error::Config))
                        .collect::<Result<_>>()?;
                }
                "size_dists" => {
                    cfg.size_dists =
                        value.split(',').map(|s| parse_size_dist(s.trim())).collect::<Result<_>>()?;
                }
                "capacity_bytes" => cfg.capacity_bytes = parse_num(key, value)?,
                "target_occupancy" => cfg.target_occupancy = parse_num(key, value)?,
                "write_buffer_bytes" => cfg.write_buffer_bytes = parse_num(key, value)?,
                "measurement_ages" => {
                    cfg.measurement_ages = value
                        .split(',')
                        .map(|s| parse_num("measurement_ages", s.trim()))
                        .collect::<Result<_>>()?;
                }
                "read_sample_count" => cfg.read_sample_count = parse_num(key, value)?,
                "churn_delete_create" => cfg.churn_delete_create = parse_num(key, value)?,
                "cluster_bytes" => cfg.cluster_bytes = parse_num(key, value)?,
                "page_bytes" => cfg.page_bytes = parse_num(key, value)?,
                "page_header_bytes" => cfg.page_header_bytes = parse_num(key, value)?,
                "alloc_policy" => cfg.alloc_policy = value.parse().map_err(Error::Config)?,
                "scan_mode" => cfg.scan_mode = value.parse().map_err(Error::Config)?,
                "keep_images" => cfg.keep_images = parse_num(key, value)?,
                "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
                "fs_root" => cfg.fs_root = Some(PathBuf::from(value)),
                "metadata_bytes" => cfg.metadata_bytes = parse_num(key, value)?,
                "seek_ms" => cfg.seek_ms = parse_num(key, value)?,
                "transfer_mb_s" => cfg.transfer_mb_s = parse_num(key, value)?,
                other => {
                    return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1)))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("backends", self.backends.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","));
        kv("size_dists", self.size_dists.iter().map(dist_value).collect::<Vec<_>>().join(","));
        kv("capacity_bytes", self.capacity_bytes.to_string());
        kv("target_occupancy", self.target_occupancy.to_string());
        kv("write_buffer_bytes", self.write_buffer_bytes.to_string());
        kv(
            "measurement_ages",
            self.measurement_ages.iter().map(|&a| fmt_age(a)).collect::<Vec<_>>().join(","),
        );
        kv("read_sample_count", self.read_sample_count.to_string());
        kv("churn_delete_create", self.churn_delete_create.to_string());
        kv("cluster_bytes", self.cluster_bytes.to_string());
        kv("page_bytes", self.page_bytes.to_string());
        kv("page_header_bytes", self.page_header_bytes.to_string());
        kv("alloc_policy", self.alloc_policy.name().to_string());
        kv("scan_mode", self.scan_mode.name().to_string());
        kv("keep_images", self.keep_images.to_string());
        if let Some(d) = &self.out_dir {
            kv("out_dir", d.display().to_string());
        }
        if let Some(d) = &self.fs_root {
            kv("fs_root", d.display().to_string());
        }
        kv("metadata_bytes", self.metadata_bytes.to_string());
        kv("seek_ms", self.seek_ms.to_string());
        kv("transfer_mb_s", self.transfer_mb_s.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.backends.is_empty() {
            return Err(Error::Config("backends must not be empty".into()));
        }
        if self.size_dists.is_empty() {
            return Err(Error::Config("size_dists must not be empty".into()));
        }
        if self.seek_ms < 0.0 || !(self.transfer_mb_s > 0.0) {
            return Err(Error::Config("device model needs seek_ms >= 0 and transfer_mb_s > 0".into()));
        }
        for dist in &self.size_dists {
            self.workload_spec(dist)?.validate()?;
        }
        Ok(())
    }

    /// The workload every cell with this distribution runs.
    pub fn workload_spec(&self, dist: &SizeDist) -> Result<WorkloadSpec> {
        Ok(WorkloadSpec {
            seed: self.seed,
            size_dist: *dist,
            volume_capacity_bytes: self.capacity_bytes,
            target_occupancy: self.target_occupancy,
            write_buffer_bytes: self.write_buffer_bytes,
            measurement_ages: self.measurement_ages.clone(),
            read_sample_count: self.read_sample_count,
            churn_mix: ChurnMix { delete_create: self.churn_delete_create },
        })
    }

    /// Matrix cells: every backend × every size distribution, in config
    /// order.
    pub fn cells(&self) -> Vec<(BackendKind, SizeDist)> {
        let mut out = Vec::new();
        for &b in &self.backends {
            for &d in &self.size_dists {
                out.push((b, d));
            }
        }
        out
    }

    /// Directory-name-safe cell label, e.g. `extent-constant-10485760`.
    pub fn cell_name(backend: BackendKind, dist: &SizeDist) -> String {
        format!("{backend}-{}-{}", dist.label(), dist.mean_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_default() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn parses_overrides_and_comments() {
        let text = "
# figure 3 analogue
seed = 7
backends = extent , page
size_dists = constant:10485760, uniform:10485760
capacity_bytes = 2147483648
measurement_ages = 0, 2, 4
read_sample_count = 200   # trimmed for runtime
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.backends, vec![BackendKind::Extent, BackendKind::Page]);
        assert_eq!(
            cfg.size_dists,
            vec![
                SizeDist::Constant { bytes: 10485760 },
                SizeDist::UniformAboutMean { mean_bytes: 10485760 }
            ]
        );
        assert_eq!(cfg.cells().len(), 4);
        assert_eq!(cfg.read_sample_count, 200);
        assert_eq!(
            ExperimentConfig::cell_name(BackendKind::Page, &cfg.size_dists[1]),
            "page-uniform-10485760"
        );
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(
            ExperimentConfig::parse("sede = 7"),
            Err(Error::Config(msg)) if msg.contains("unknown key")
        ));
        assert!(matches!(
            ExperimentConfig::parse("seed = 7\nseed = 8"),
            Err(Error::Config(msg)) if msg.contains("duplicate")
        ));
        assert!(ExperimentConfig::parse("target_occupancy = 1.5").is_err());
    }
}
