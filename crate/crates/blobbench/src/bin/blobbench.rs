//! Command-line front end: format images, run experiments, scan images,
//! defragment, render figures, and run the crash-injection matrices.
//!
//! Usage errors exit 2 (clap's default). Runtime failures print one
//! machine-readable JSON line to stderr and exit 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blobbench::bench::run_experiment;
use blobbench::config::ExperimentConfig;
use blobbench::crash::{run_fs_matrix, run_page_matrix, CrashCase};
use blobbench::error::{Error, Result};
use blobbench::extent_store::{ExtentConfig, ExtentStore};
use blobbench::page_store::{PageConfig, PageStore, DEFAULT_PAGE_HEADER};
use blobbench::report::{render_figures, FigureKind};
use blobbench::scanner::{live_list_from_csv, scan_image, DEFAULT_GAP_ALLOWANCE};
use blobbench::store::BackendKind;
use blobbench::volume::{Geometry, VolumeImage};
use blobbench::wal::Wal;

const RESULTS_ENV: &str = "BLOBBENCH_RESULTS";

#[derive(Parser)]
#[command(
    name = "blobbench",
    about = "Storage-aging benchmark for large-object stores",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Format a fresh volume image file.
    Init {
        /// Image file to create.
        #[arg(long)]
        image: PathBuf,
        /// Volume capacity, e.g. 2147483648, 512M or 2G.
        #[arg(long)]
        capacity: String,
        /// Store layout to initialize the metadata region for.
        #[arg(long, default_value = "extent")]
        backend: BackendKind,
        /// Cluster size in bytes (extent allocation granule).
        #[arg(long, default_value_t = 4096)]
        cluster: u32,
        /// Page size in bytes.
        #[arg(long, default_value_t = 8192)]
        page: u32,
        /// Metadata region bytes; 0 picks a capacity-scaled default.
        #[arg(long, default_value = "0")]
        metadata: String,
    },
    /// Run the experiment matrix described by a config file.
    Bench {
        /// key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Results directory (default: $BLOBBENCH_RESULTS or ./results).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scan a raw image for payload markers and report fragmentation.
    Scan {
        /// Image file to scan (opened read-only).
        #[arg(long)]
        image: PathBuf,
        /// Live-object list CSV (written by bench runs with keep_images).
        #[arg(long)]
        live: PathBuf,
        /// Write the report CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Age label stamped into the report.
        #[arg(long, default_value = "scan")]
        age: String,
        /// Gap allowance in bytes between consecutive markers.
        #[arg(long, default_value_t = DEFAULT_GAP_ALLOWANCE)]
        gap_allowance: u64,
    },
    /// Defragment an image-backed store.
    Defrag {
        /// Image file to defragment.
        #[arg(long)]
        image: PathBuf,
        /// Which store layout the image holds.
        #[arg(long)]
        backend: BackendKind,
        /// Page backend only: path for the compacted copy
        /// (default: <image>.defrag).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Copy buffer in bytes.
        #[arg(long, default_value_t = 1 << 20)]
        buffer: usize,
    },
    /// Render SVG figures from a results directory.
    Report {
        /// Results directory (default: $BLOBBENCH_RESULTS or ./results).
        #[arg(long)]
        r#in: Option<PathBuf>,
        /// Figure to render; omit for all of them.
        #[arg(long)]
        fig: Option<FigureKind>,
        /// Output directory (default: <in>/figures).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the crash-injection matrices and verify old-or-new semantics.
    Crashtest {
        /// Backend to exercise; omit for both.
        #[arg(long)]
        backend: Option<BackendKind>,
        /// First seed of the sweep.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of seeds per backend.
        #[arg(long, default_value_t = 250)]
        cases: u64,
        /// Scratch directory for the fs matrix (default: a temp dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<u64> {
    let t = s.trim();
    let (num, mult) = match t.char_indices().find(|(_, c)| !c.is_ascii_digit()) {
        None => (t, 1u64),
        Some((i, _)) => {
            let mult = match t[i..].trim().to_ascii_uppercase().as_str() {
                "K" | "KB" => 1u64 << 10,
                "M" | "MB" => 1 << 20,
                "G" | "GB" => 1 << 30,
                other => {
                    return Err(Error::Config(format!("unknown size suffix '{other}' in '{s}'")))
                }
            };
            (&t[..i], mult)
        }
    };
    let n: u64 = num
        .parse()
        .map_err(|_| Error::Config(format!("unparseable size '{s}'")))?;
    Ok(n * mult)
}

fn default_results_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(RESULTS_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn cmd_init(
    image: &Path,
    capacity: &str,
    backend: BackendKind,
    cluster: u32,
    page: u32,
    metadata: &str,
) -> Result<()> {
    let capacity = parse_size(capacity)?;
    let metadata = parse_size(metadata)?;
    let geom = Geometry::new(capacity, cluster, page, metadata);
    match backend {
        BackendKind::Extent => {
            let img = VolumeImage::create_file(image, geom)?;
            let store = ExtentStore::new(img, ExtentConfig::default())?;
            store.close()?;
        }
        BackendKind::Page => {
            let img = VolumeImage::create_file(image, geom)?;
            let wal = PathBuf::from(format!("{}.wal", image.display()));
            let store = PageStore::create_file_backed(
                img,
                &wal,
                PageConfig { header_bytes: DEFAULT_PAGE_HEADER },
            )?;
            store.close()?;
            println!("log: {}", wal.display());
        }
        BackendKind::Fs => {
            return Err(Error::Config(
                "the fs backend stores objects as plain files; there is no image to format"
                    .into(),
            ))
        }
    }
    println!(
        "initialized {} ({backend}): capacity {capacity}, cluster {cluster}, page {page}",
        image.display()
    );
    Ok(())
}

fn cmd_bench(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out_root = default_results_dir(out);
    let summaries = run_experiment(&cfg, &out_root)?;
    for s in &summaries {
        match &s.failed {
            Some(why) => println!("cell {}: FAILED ({why})", s.cell),
            None => {
                let last = s.age_points.last();
                println!(
                    "cell {}: {} age points, final mean fragments {}",
                    s.cell,
                    s.age_points.len(),
                    last.map_or("n/a".to_string(), |p| format!("{:.3}", p.mean_fragments)),
                );
            }
        }
    }
    println!("results: {}", out_root.display());
    Ok(())
}

fn cmd_scan(
    image: &Path,
    live: &Path,
    out: Option<PathBuf>,
    age: &str,
    gap_allowance: u64,
) -> Result<()> {
    let img = VolumeImage::open_file_readonly(image)?;
    let live = live_list_from_csv(&fs::read_to_string(live)?)?;
    let report = scan_image(&img, &live, age, gap_allowance)?;
    let csv = report.to_csv();
    match out {
        Some(path) => {
            fs::write(&path, csv)?;
            println!(
                "scanned {} objects, mean fragments {}: {}",
                report.objects.len(),
                report.mean_fragments().map_or("n/a".to_string(), |m| format!("{m:.3}")),
                path.display()
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_defrag(
    image: &Path,
    backend: BackendKind,
    out: Option<PathBuf>,
    buffer: usize,
) -> Result<()> {
    match backend {
        BackendKind::Extent => {
            let img = VolumeImage::open_file(image)?;
            let mut store = ExtentStore::open(img, ExtentConfig::default())?;
            let moved = store.defragment()?;
            store.close()?;
            println!("defragmented {} in place: {moved} blobs moved", image.display());
        }
        BackendKind::Page => {
            let img = VolumeImage::open_file(image)?;
            let geom = img.geometry();
            let wal_path = PathBuf::from(format!("{}.wal", image.display()));
            let mut store = PageStore::open_file_backed(
                img,
                &wal_path,
                PageConfig { header_bytes: DEFAULT_PAGE_HEADER },
            )?;
            let target = out.unwrap_or_else(|| {
                PathBuf::from(format!("{}.defrag", image.display()))
            });
            let target_wal = PathBuf::from(format!("{}.wal", target.display()));
            let fresh_img = VolumeImage::create_file(&target, geom)?;
            let fresh_wal = Wal::create_file(&target_wal)?;
            let (fresh, copied) = store.defragment_by_copy(fresh_img, fresh_wal, buffer)?;
            fresh.close()?;
            println!(
                "copied {copied} blobs into {} (log {})",
                target.display(),
                target_wal.display()
            );
        }
        BackendKind::Fs => {
            return Err(Error::Config(
                "the fs backend delegates placement to the host filesystem; defragment \
                 it with the host's own tools"
                    .into(),
            ))
        }
    }
    Ok(())
}

fn cmd_report(
    in_dir: Option<PathBuf>,
    fig: Option<FigureKind>,
    out: Option<PathBuf>,
) -> Result<()> {
    let results = default_results_dir(in_dir);
    let out_dir = out.unwrap_or_else(|| results.join("figures"));
    let kinds: Vec<FigureKind> = match fig {
        Some(k) => vec![k],
        None => FigureKind::ALL.to_vec(),
    };
    let written = render_figures(&results, &kinds, &out_dir)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn summarize_matrix(name: &str, cases: &[CrashCase]) -> u64 {
    let old = cases.iter().filter(|c| c.verdict == blobbench::crash::Verdict::Old).count();
    let new = cases.iter().filter(|c| c.verdict == blobbench::crash::Verdict::New).count();
    let bad: Vec<&CrashCase> = cases.iter().filter(|c| !c.ok()).collect();
    println!(
        "{name}: {} cases, verdicts old={old} new={new}, violations={}",
        cases.len(),
        bad.len()
    );
    for c in &bad {
        println!(
            "  seed {} cut {}: expected {}, got {}, leaked {}",
            c.seed,
            c.cut,
            c.expected.name(),
            c.verdict.name(),
            c.leaked
        );
    }
    bad.len() as u64
}

fn cmd_crashtest(
    backend: Option<BackendKind>,
    seed: u64,
    cases: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let seeds = seed..seed + cases;
    let mut violations = 0;
    let run_fs = matches!(backend, None | Some(BackendKind::Fs));
    let run_page = matches!(backend, None | Some(BackendKind::Page));
    if matches!(backend, Some(BackendKind::Extent)) {
        return Err(Error::Config(
            "crash injection targets the safe-write paths: fs and page".into(),
        ));
    }
    if run_fs {
        let scratch_owned;
        let scratch: &Path = match &out {
            Some(p) => {
                fs::create_dir_all(p)?;
                p
            }
            None => {
                scratch_owned = std::env::temp_dir().join(format!("blobbench-crash-{seed}"));
                fs::create_dir_all(&scratch_owned)?;
                &scratch_owned
            }
        };
        let cases = run_fs_matrix(scratch, seeds.clone(), 192 << 10, 64 << 10)?;
        violations += summarize_matrix("fs", &cases);
    }
    if run_page {
        let cases = run_page_matrix(seeds, 192 << 10, 64 << 10)?;
        violations += summarize_matrix("page", &cases);
    }
    if violations > 0 {
        return Err(Error::Invariant(format!(
            "{violations} crash cases violated old-or-new recovery"
        )));
    }
    println!("all crash cases recovered old-or-new with nothing leaked");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Init { image, capacity, backend, cluster, page, metadata } => {
            cmd_init(&image, &capacity, backend, cluster, page, &metadata)
        }
        Cmd::Bench { config, seed, out } => cmd_bench(&config, seed, out),
        Cmd::Scan { image, live, out, age, gap_allowance } => {
            cmd_scan(&image, &live, out, &age, gap_allowance)
        }
        Cmd::Defrag { image, backend, out, buffer } => cmd_defrag(&image, backend, out, buffer),
        Cmd::Report { r#in, fig, out } => cmd_report(r#in, fig, out),
        Cmd::Crashtest { backend, seed, cases, out } => cmd_crashtest(backend, seed, cases, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.code(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
