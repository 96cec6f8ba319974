//! Figure rendering over a results directory.
//!
//! Reads the per-cell artifacts written by the bench driver (`phases.csv`,
//! `frag_age<k>.csv`, `summary.json`) and renders SVG line charts. Rendering
//! is a pure function of those inputs: no timestamps, no randomness, stable
//! iteration order everywhere, so the same results directory always produces
//! byte-identical SVG.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::{CellSummary, PhaseRow, PHASES_CSV_SCHEMA, SUMMARY_SCHEMA};
use crate::error::{Error, Result};
use crate::scanner::FragReport;

/// The figures the report step can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    /// Mean fragments per object vs storage age, one line per cell.
    FragVsAge,
    /// Modeled read/write throughput vs storage age, two lines per cell.
    TputVsAge,
    /// Modeled throughput vs object size at the highest age common to all
    /// cells, one read and one write line per backend.
    TputVsSize,
    /// Constant vs uniform size distribution overlay (fragments vs age).
    ConstVsUniform,
    /// Fragments vs age for cells that differ only in free-pool size.
    FreePool,
}

impl FigureKind {
    pub const ALL: [FigureKind; 5] = [
        FigureKind::FragVsAge,
        FigureKind::TputVsAge,
        FigureKind::TputVsSize,
        FigureKind::ConstVsUniform,
        FigureKind::FreePool,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FigureKind::FragVsAge => "frag-vs-age",
            FigureKind::TputVsAge => "tput-vs-age",
            FigureKind::TputVsSize => "tput-vs-size",
            FigureKind::ConstVsUniform => "const-vs-uniform",
            FigureKind::FreePool => "free-pool",
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.svg", self.name().replace('-', "_"))
    }
}

impl std::str::FromStr for FigureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<FigureKind> {
        FigureKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown figure '{s}' (expected one of: {})",
                    FigureKind::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

/// Everything the report step knows about one cell directory.
#[derive(Debug, Clone)]
pub struct CellData {
    pub summary: CellSummary,
    pub phases: Vec<PhaseRow>,
    /// Fragmentation reports keyed by age, ascending.
    pub frags: Vec<(f64, FragReport)>,
}

fn age_from_label(label: &str) -> Result<f64> {
    label
        .replace('p', ".")
        .parse::<f64>()
        .map_err(|_| Error::Report(format!("unparseable age label '{label}'")))
}

fn parse_phases_csv(text: &str, path: &Path) -> Result<Vec<PhaseRow>> {
    let mut lines = text.lines();
    let schema = lines.next().unwrap_or_default();
    let want = format!("# schema: {PHASES_CSV_SCHEMA}");
    if schema != want {
        return Err(Error::Report(format!(
            "{}: schema line '{schema}' does not match '{want}'; refusing to plot",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.starts_with('#') || line.starts_with("phase,") || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Report(format!(
                "{}: expected 7 columns, got {}",
                path.display(),
                f.len()
            )));
        }
        let bad = |what: &str| Error::Report(format!("{}: bad {what} in '{line}'", path.display()));
        rows.push(PhaseRow {
            phase: f[0].to_string(),
            age: f[1].parse().map_err(|_| bad("age"))?,
            ops: f[2].parse().map_err(|_| bad("ops"))?,
            bytes_moved: f[3].parse().map_err(|_| bad("bytes_moved"))?,
            seeks: f[4].parse().map_err(|_| bad("seeks"))?,
            modeled_seconds: f[5].parse().map_err(|_| bad("modeled_seconds"))?,
            modeled_mb_s: f[6].parse().map_err(|_| bad("modeled_mb_s"))?,
        });
    }
    Ok(rows)
}

/// Load every cell directory under `results_dir`. A cell is any immediate
/// subdirectory containing `summary.json`. Errors if none exist.
pub fn load_results(results_dir: &Path) -> Result<Vec<CellData>> {
    let mut cells = Vec::new();
    let mut entries: Vec<PathBuf> = match fs::read_dir(results_dir) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
        Err(e) => {
            return Err(Error::Report(format!(
                "cannot read results directory {}: {e}",
                results_dir.display()
            )))
        }
    };
    entries.sort();
    for dir in entries {
        let summary_path = dir.join("summary.json");
        if !dir.is_dir() || !summary_path.is_file() {
            continue;
        }
        let summary: CellSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)
            .map_err(|e| Error::Report(format!("{}: {e}", summary_path.display())))?;
        if summary.schema != SUMMARY_SCHEMA {
            return Err(Error::Report(format!(
                "{}: schema '{}' does not match '{SUMMARY_SCHEMA}'; refusing to plot",
                summary_path.display(),
                summary.schema
            )));
        }
        let phases_path = dir.join("phases.csv");
        let phases = parse_phases_csv(&fs::read_to_string(&phases_path)?, &phases_path)?;
        let mut frags = Vec::new();
        let mut frag_paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("frag_age") && n.ends_with(".csv"))
            })
            .collect();
        frag_paths.sort();
        for p in frag_paths {
            let report = FragReport::from_csv(&fs::read_to_string(&p)?)?;
            let age = age_from_label(&report.age_label)?;
            frags.push((age, report));
        }
        frags.sort_by(|a, b| a.0.total_cmp(&b.0));
        cells.push(CellData { summary, phases, frags });
    }
    if cells.is_empty() {
        return Err(Error::Report(format!(
            "no cells found under {}: expected one directory per cell containing \
             summary.json, phases.csv and frag_age<age>.csv",
            results_dir.display()
        )));
    }
    Ok(cells)
}

/// One plotted line.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Chart description handed to the SVG renderer.
#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Plot x on a log2 axis with byte-size tick labels.
    pub log2_x: bool,
    pub series: Vec<Series>,
    /// Rendered under the plot; used for absent-series annotations.
    pub notes: Vec<String>,
}

fn frag_points(cell: &CellData) -> Vec<(f64, f64)> {
    cell.frags
        .iter()
        .filter_map(|(age, r)| r.mean_fragments().map(|m| (*age, m)))
        .collect()
}

/// Write throughput per phase row: bulk load plots at age 0, a churn phase at
/// the age it ends on.
fn is_read_phase(row: &PhaseRow) -> bool {
    row.phase.starts_with("read_pass")
}

fn push_failed_notes(cells: &[CellData], notes: &mut Vec<String>) {
    for c in cells {
        if let Some(why) = &c.summary.failed {
            notes.push(format!("cell {} failed: {why}", c.summary.cell));
        }
        if c.summary.fragmentation_informational {
            notes.push(format!(
                "cell {}: fragment counts are ground truth only (no raw image to scan)",
                c.summary.cell
            ));
        }
    }
}

pub fn build_figure(cells: &[CellData], kind: FigureKind) -> Result<Chart> {
    let mut chart = Chart {
        title: String::new(),
        x_label: "storage age".to_string(),
        y_label: String::new(),
        log2_x: false,
        series: Vec::new(),
        notes: Vec::new(),
    };
    push_failed_notes(cells, &mut chart.notes);
    match kind {
        FigureKind::FragVsAge => {
            chart.title = "Mean fragments per object vs storage age".to_string();
            chart.y_label = "mean fragments".to_string();
            for c in cells {
                let points = frag_points(c);
                if points.is_empty() {
                    chart
                        .notes
                        .push(format!("absent series: {} (no fragment reports)", c.summary.cell));
                    continue;
                }
                chart.series.push(Series { label: c.summary.cell.clone(), points });
            }
        }
        FigureKind::TputVsAge => {
            chart.title = "Modeled throughput vs storage age".to_string();
            chart.y_label = "MB/s".to_string();
            for c in cells {
                let mut write = Vec::new();
                let mut read = Vec::new();
                for r in &c.phases {
                    if is_read_phase(r) {
                        read.push((r.age, r.modeled_mb_s));
                    } else {
                        write.push((r.age, r.modeled_mb_s));
                    }
                }
                if write.is_empty() && read.is_empty() {
                    chart
                        .notes
                        .push(format!("absent series: {} (no phases)", c.summary.cell));
                    continue;
                }
                if !write.is_empty() {
                    chart.series.push(Series {
                        label: format!("{} write", c.summary.cell),
                        points: write,
                    });
                }
                if !read.is_empty() {
                    chart.series.push(Series {
                        label: format!("{} read", c.summary.cell),
                        points: read,
                    });
                }
            }
        }
        FigureKind::TputVsSize => {
            chart.x_label = "object size".to_string();
            chart.y_label = "MB/s".to_string();
            chart.log2_x = true;
            // Highest read-pass age present in every cell, so the comparison
            // is at one storage age.
            let mut common: Option<f64> = None;
            for c in cells {
                let cell_max = c
                    .phases
                    .iter()
                    .filter(|r| is_read_phase(r))
                    .map(|r| r.age)
                    .fold(f64::NEG_INFINITY, f64::max);
                common = Some(match common {
                    None => cell_max,
                    Some(v) => v.min(cell_max),
                });
            }
            let age = common.unwrap_or(f64::NEG_INFINITY);
            if !age.is_finite() {
                chart.title = "Modeled throughput vs object size".to_string();
                chart.notes.push("absent series: no read passes in any cell".to_string());
                return Ok(chart);
            }
            chart.title = format!("Modeled throughput vs object size at age {}", fmt_num(age));
            // backend -> (size -> (read mb/s, write mb/s))
            let mut by_backend: BTreeMap<String, BTreeMap<u64, (Option<f64>, Option<f64>)>> =
                BTreeMap::new();
            for c in cells {
                let slot = by_backend
                    .entry(c.summary.backend.clone())
                    .or_default()
                    .entry(c.summary.mean_object_bytes)
                    .or_default();
                for r in &c.phases {
                    if r.age == age && is_read_phase(r) {
                        slot.0 = Some(r.modeled_mb_s);
                    }
                    if r.age == age && !is_read_phase(r) {
                        slot.1 = Some(r.modeled_mb_s);
                    }
                }
                // Age 0 write throughput lives in the bulk-load row.
                if age == 0.0 && slot.1.is_none() {
                    if let Some(b) = c.phases.iter().find(|r| r.phase == "bulk_load") {
                        slot.1 = Some(b.modeled_mb_s);
                    }
                }
            }
            for (backend, sizes) in &by_backend {
                if sizes.len() < 2 {
                    chart.notes.push(format!(
                        "absent series: {backend} has a single object size; size sweep needs more cells"
                    ));
                }
                let reads: Vec<(f64, f64)> = sizes
                    .iter()
                    .filter_map(|(&sz, &(r, _))| r.map(|v| (sz as f64, v)))
                    .collect();
                let writes: Vec<(f64, f64)> = sizes
                    .iter()
                    .filter_map(|(&sz, &(_, w))| w.map(|v| (sz as f64, v)))
                    .collect();
                if !reads.is_empty() {
                    chart
                        .series
                        .push(Series { label: format!("{backend} read"), points: reads });
                }
                if !writes.is_empty() {
                    chart
                        .series
                        .push(Series { label: format!("{backend} write"), points: writes });
                }
            }
        }
        FigureKind::ConstVsUniform => {
            chart.title = "Constant vs uniform object sizes".to_string();
            chart.y_label = "mean fragments".to_string();
            // (backend, mean size) -> dist label -> cell
            let mut groups: BTreeMap<(String, u64), BTreeMap<String, &CellData>> = BTreeMap::new();
            for c in cells {
                let dist = c
                    .summary
                    .size_dist
                    .split(':')
                    .next()
                    .unwrap_or(&c.summary.size_dist)
                    .to_string();
                groups
                    .entry((c.summary.backend.clone(), c.summary.mean_object_bytes))
                    .or_default()
                    .insert(dist, c);
            }
            for ((backend, mean), dists) in &groups {
                for want in ["constant", "uniform"] {
                    match dists.get(want) {
                        Some(c) => chart.series.push(Series {
                            label: format!("{backend} {want} {}", fmt_bytes(*mean as f64)),
                            points: frag_points(c),
                        }),
                        None => chart.notes.push(format!(
                            "absent series: {backend} {want} at mean {}",
                            fmt_bytes(*mean as f64)
                        )),
                    }
                }
            }
        }
        FigureKind::FreePool => {
            chart.title = "Fragmentation vs free-pool size".to_string();
            chart.y_label = "mean fragments".to_string();
            // Cells that share backend + size distribution but differ in
            // free-pool size (i.e. volume capacity at a fixed occupancy).
            let mut groups: BTreeMap<(String, String), Vec<&CellData>> = BTreeMap::new();
            for c in cells {
                groups
                    .entry((c.summary.backend.clone(), c.summary.size_dist.clone()))
                    .or_default()
                    .push(c);
            }
            for ((backend, dist), mut group) in groups {
                group.sort_by_key(|c| c.summary.free_pool_after_bulk);
                if group.len() < 2 {
                    chart.notes.push(format!(
                        "absent series: {backend} {dist} has one pool size; comparison needs \
                         cells at different capacities"
                    ));
                }
                for c in group {
                    chart.series.push(Series {
                        label: format!(
                            "{backend} {dist} pool {}",
                            c.summary.free_pool_after_bulk
                        ),
                        points: frag_points(c),
                    });
                }
            }
        }
    }
    chart.series.retain(|s| !s.points.is_empty());
    Ok(chart)
}

// ---------------------------------------------------------------------------
// SVG rendering

const CHART_W: f64 = 860.0;
const CHART_H: f64 = 520.0;
const MARGIN_L: f64 = 72.0;
const MARGIN_R: f64 = 230.0;
const MARGIN_T: f64 = 46.0;
const MARGIN_B: f64 = 58.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Trim a formatted float to at most 3 decimals with no trailing zeros.
fn fmt_num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn fmt_bytes(v: f64) -> String {
    const UNITS: [(&str, f64); 4] =
        [("GB", 1073741824.0), ("MB", 1048576.0), ("KB", 1024.0), ("B", 1.0)];
    for (unit, scale) in UNITS {
        if v >= scale {
            return format!("{}{unit}", fmt_num(v / scale));
        }
    }
    format!("{}B", fmt_num(v))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Evenly spaced "nice" tick positions covering [min, max].
fn nice_ticks(min: f64, max: f64, target: usize) -> Vec<f64> {
    let range = (max - min).max(f64::EPSILON);
    let raw_step = range / target as f64;
    let mag = 10f64.powf(raw_step.log10().floor());
    let norm = raw_step / mag;
    let step = mag
        * if norm <= 1.0 {
            1.0
        } else if norm <= 2.0 {
            2.0
        } else if norm <= 2.5 {
            2.5
        } else if norm <= 5.0 {
            5.0
        } else {
            10.0
        };
    let mut ticks = Vec::new();
    let mut t = (min / step).ceil() * step;
    while t <= max + step * 1e-9 {
        // Snap tiny float residue so labels read "2" not "2.0000000000000004".
        let snapped = (t / step).round() * step;
        ticks.push(snapped);
        t += step;
    }
    ticks
}

pub fn render_svg(chart: &Chart) -> String {
    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    let note_h = 16.0 * chart.notes.len() as f64;
    let total_h = CHART_H + note_h;

    // Transform points (log2 on x when requested) and find ranges.
    let tx = |x: f64| if chart.log2_x { x.log2() } else { x };
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in &chart.series {
        for &(x, y) in &s.points {
            xs.push(tx(x));
            ys.push(y);
        }
    }
    let (mut x_min, mut x_max) = match (
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    ) {
        (min, max) if min.is_finite() => (min, max),
        _ => (0.0, 1.0),
    };
    if x_max - x_min < 1e-12 {
        x_min -= 0.5;
        x_max += 0.5;
    }
    let y_top = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_max = if y_top.is_finite() && y_top > 0.0 { y_top * 1.08 } else { 1.0 };
    let y_min = 0.0;

    let px = |x: f64| MARGIN_L + (tx(x) - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| MARGIN_T + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{total_h}\" \
         viewBox=\"0 0 {CHART_W} {total_h}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{CHART_W}\" height=\"{total_h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        xml_escape(&chart.title)
    ));

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MARGIN_L,
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MARGIN_L, MARGIN_T, MARGIN_L,
        MARGIN_T + plot_h
    ));

    for t in nice_ticks(x_min, x_max, 6) {
        let x = MARGIN_L + (t - x_min) / (x_max - x_min) * plot_w;
        let label = if chart.log2_x { fmt_bytes(t.exp2()) } else { fmt_num(t) };
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#cccccc\"/>\n",
            MARGIN_T,
            MARGIN_T + plot_h
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
            MARGIN_T + plot_h + 18.0,
            xml_escape(&label)
        ));
    }
    for t in nice_ticks(y_min, y_max, 5) {
        let y = py(t);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#cccccc\"/>\n",
            MARGIN_L,
            MARGIN_L + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"12\">{}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_num(t)
        ));
    }

    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        MARGIN_T + plot_h + 40.0,
        xml_escape(&chart.x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"20\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 20 {:.1})\">{}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        xml_escape(&chart.y_label)
    ));

    // Series lines, markers, legend.
    for (i, s) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        if coords.len() > 1 {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                coords.join(" ")
            ));
        }
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        let ly = MARGIN_T + 14.0 + i as f64 * 18.0;
        let lx = MARGIN_L + plot_w + 14.0;
        svg.push_str(&format!(
            "<line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n",
            ly - 4.0,
            lx + 22.0,
            ly - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"12\">{}</text>\n",
            lx + 28.0,
            xml_escape(&s.label)
        ));
    }
    if chart.series.is_empty() {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"14\" \
             fill=\"#888888\">no data</text>\n",
            MARGIN_L + plot_w / 2.0,
            MARGIN_T + plot_h / 2.0
        ));
    }

    for (i, note) in chart.notes.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"#a05a00\">note: {}</text>\n",
            MARGIN_L,
            CHART_H - 6.0 + i as f64 * 16.0,
            xml_escape(note)
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

/// Render the requested figures from `results_dir` into `out_dir`, returning
/// the written paths.
pub fn render_figures(
    results_dir: &Path,
    kinds: &[FigureKind],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let cells = load_results(results_dir)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for kind in kinds {
        let chart = build_figure(&cells, *kind)?;
        let path = out_dir.join(kind.file_name());
        fs::write(&path, render_svg(&chart))?;
        written.push(path);
    }
    Ok(written)
}
