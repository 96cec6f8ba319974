//! Workload model: object-size distributions, seeded operation streams, and
//! storage-age accounting.
//!
//! Storage age is churned bytes over live bytes — "safe writes per object"
//! under pure overwrite churn. A stream is derived entirely from a
//! `WorkloadSpec`; equal specs yield byte-identical streams.
//!
//! RNG contract (part of the stream definition, kept deliberately portable):
//! a single ChaCha8 stream seeded with `seed_from_u64(spec.seed)`, consumed
//! strictly in order. Bulk load draws one size per attempted object
//! (`Constant` draws nothing); each churn step draws the victim index
//! (`next_u64 % n`), then — only if the delete/create mix is nonzero — one
//! op-selector word, then the new size; each read draws one index. The modulo
//! bias for desk-scale `n` is below 2^-40 and ignored.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::marker::MARKER_INTERVAL;
use crate::store::ObjectId;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SizeDist {
    /// Every object is exactly `bytes`.
    Constant { bytes: u64 },
    /// Uniform over `[mean/2, 3·mean/2]` on the 1 KiB grid; the grid bounds
    /// are chosen so the expectation equals `mean_bytes` exactly.
    UniformAboutMean { mean_bytes: u64 },
}

impl SizeDist {
    pub fn mean_bytes(&self) -> u64 {
        match *self {
            SizeDist::Constant { bytes } => bytes,
            SizeDist::UniformAboutMean { mean_bytes } => mean_bytes,
        }
    }

    /// Largest size the distribution can emit.
    pub fn upper_bound(&self) -> u64 {
        match *self {
            SizeDist::Constant { bytes } => bytes,
            SizeDist::UniformAboutMean { mean_bytes } => {
                (3 * (mean_bytes / MARKER_INTERVAL) / 2) * MARKER_INTERVAL
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mean_bytes();
        if m == 0 {
            return Err(Error::Config("size distribution mean must be positive".into()));
        }
        if m % MARKER_INTERVAL != 0 {
            return Err(Error::Config(format!(
                "size distribution mean {m} must be a multiple of {MARKER_INTERVAL}"
            )));
        }
        Ok(())
    }

    /// Draw one size. `Constant` consumes no RNG words; `UniformAboutMean`
    /// consumes exactly one.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match *self {
            SizeDist::Constant { bytes } => bytes,
            SizeDist::UniformAboutMean { mean_bytes } => {
                let m = mean_bytes / MARKER_INTERVAL;
                let lo = m.div_ceil(2);
                let hi = 3 * m / 2;
                let n = hi - lo + 1;
                (lo + rng.next_u64() % n) * MARKER_INTERVAL
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SizeDist::Constant { .. } => "constant",
            SizeDist::UniformAboutMean { .. } => "uniform",
        }
    }
}

/// Fraction of churn operations performed as a delete followed by a fresh
/// create, instead of an in-place safe-write overwrite. Default 0: pure
/// safe-write churn, the measured regime.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChurnMix {
    pub delete_create: f64,
}

impl Default for ChurnMix {
    fn default() -> Self {
        ChurnMix { delete_create: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub size_dist: SizeDist,
    pub volume_capacity_bytes: u64,
    /// Fraction of capacity filled by the bulk load, in (0, 1).
    pub target_occupancy: f64,
    pub write_buffer_bytes: u64,
    /// Storage ages at which read passes and scans happen. Sorted ascending.
    pub measurement_ages: Vec<f64>,
    pub read_sample_count: u64,
    pub churn_mix: ChurnMix,
}

pub const DEFAULT_WRITE_BUFFER: u64 = 65536;
pub const DEFAULT_READ_SAMPLES: u64 = 1000;

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        self.size_dist.validate()?;
        if !(self.target_occupancy > 0.0 && self.target_occupancy < 1.0) {
            return Err(Error::Config(format!(
                "target_occupancy {} must be in (0, 1)",
                self.target_occupancy
            )));
        }
        if self.write_buffer_bytes == 0 || self.write_buffer_bytes % MARKER_INTERVAL != 0 {
            return Err(Error::Config(format!(
                "write_buffer_bytes {} must be a positive multiple of {MARKER_INTERVAL}",
                self.write_buffer_bytes
            )));
        }
        let budget = (self.target_occupancy * self.volume_capacity_bytes as f64) as u64;
        if budget < 2 * self.size_dist.upper_bound() {
            return Err(Error::Config(format!(
                "occupancy budget {budget} cannot hold two objects of up to {} bytes",
                self.size_dist.upper_bound()
            )));
        }
        if self.measurement_ages.is_empty() {
            return Err(Error::Config("measurement_ages must not be empty".into()));
        }
        let mut prev = -1.0;
        for &a in &self.measurement_ages {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::Config(format!("measurement age {a} must be a non-negative number")));
            }
            if a <= prev {
                return Err(Error::Config("measurement_ages must be strictly ascending".into()));
            }
            prev = a;
        }
        if self.read_sample_count == 0 {
            return Err(Error::Config("read_sample_count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.churn_mix.delete_create) {
            return Err(Error::Config("churn_mix delete_create fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn bulk_budget_bytes(&self) -> u64 {
        (self.target_occupancy * self.volume_capacity_bytes as f64) as u64
    }
}

/// Churned-vs-live byte accounting.
///
/// `churned_bytes` accumulates the size of every object that has been
/// overwritten or deleted since bulk load; `live_bytes` tracks current
/// occupancy. Age = churned / live.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StorageAgeLedger {
    pub live_bytes: u64,
    pub churned_bytes: u64,
}

impl StorageAgeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply one event's effect: `churned_delta` bytes of once-existing
    /// objects retired, `live_delta` change in current occupancy.
    pub fn record_churn(&mut self, churned_delta: u64, live_delta: i64) -> Result<()> {
        self.churned_bytes += churned_delta;
        let live = self.live_bytes as i64 + live_delta;
        if live < 0 {
            return Err(Error::Invariant(format!(
                "live bytes would go negative ({} {live_delta:+})",
                self.live_bytes
            )));
        }
        self.live_bytes = live as u64;
        Ok(())
    }

    /// Defined only while something is live.
    pub fn age(&self) -> Option<f64> {
        (self.live_bytes > 0).then(|| self.churned_bytes as f64 / self.live_bytes as f64)
    }
}

/// One workload event. `tag` is the payload tag stamped into the written
/// bytes: globally unique per written generation, so a raw scan can tell a
/// live copy from stale bytes of an earlier generation of the same object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    BulkCreate { id: ObjectId, size: u64, tag: u64 },
    SafeWrite { id: ObjectId, size: u64, tag: u64 },
    Read { id: ObjectId },
    Delete { id: ObjectId },
    Create { id: ObjectId, size: u64, tag: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseKind {
    BulkLoad,
    /// Churn from one measurement age to the next target.
    Churn { age_from: f64, age_to: f64 },
    ReadPass { age: f64 },
}

#[derive(Debug, Clone)]
pub struct StreamPhase {
    pub kind: PhaseKind,
    pub events: Vec<Event>,
    /// Exact ledger age at the end of the phase.
    pub achieved_age: f64,
}

#[derive(Debug, Clone)]
pub struct OperationStream {
    pub phases: Vec<StreamPhase>,
}

impl OperationStream {
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.phases.iter().flat_map(|p| p.events.iter())
    }

    pub fn event_count(&self) -> usize {
        self.phases.iter().map(|p| p.events.len()).sum()
    }

    /// Canonical digest of the full event sequence, for cross-cell identity
    /// checks and run summaries.
    pub fn digest_hex(&self) -> String {
        let mut h = Sha256::new();
        for ev in self.events() {
            let (kind, id, size, tag): (u8, u64, u64, u64) = match *ev {
                Event::BulkCreate { id, size, tag } => (0, id.0, size, tag),
                Event::SafeWrite { id, size, tag } => (1, id.0, size, tag),
                Event::Read { id } => (2, id.0, 0, 0),
                Event::Delete { id } => (3, id.0, 0, 0),
                Event::Create { id, size, tag } => (4, id.0, size, tag),
            };
            h.update([kind]);
            h.update(id.to_le_bytes());
            h.update(size.to_le_bytes());
            h.update(tag.to_le_bytes());
        }
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

/// Derive the full operation stream for a spec.
///
/// Layout: bulk creates up to the occupancy budget, then for each measurement
/// age a churn phase (uniform victim selection over live objects) running
/// until the ledger first reaches the target, followed by a read pass of
/// `read_sample_count` uniform draws. Age 0 produces no churn phase.
pub fn build_stream(spec: &WorkloadSpec) -> Result<OperationStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_id: u64 = 1;
    let mut next_tag: u64 = 1;
    let mut phases = Vec::new();

    // Bulk load: sample until the next object would cross the budget. The
    // rejected draw, if any, stays consumed — it is part of the algorithm.
    let budget = spec.bulk_budget_bytes();
    let mut live: Vec<(ObjectId, u64)> = Vec::new();
    let mut live_total: u64 = 0;
    let mut bulk = Vec::new();
    loop {
        let size = spec.size_dist.sample(&mut rng);
        if live_total + size > budget {
            break;
        }
        let id = ObjectId(next_id);
        next_id += 1;
        let tag = next_tag;
        next_tag += 1;
        bulk.push(Event::BulkCreate { id, size, tag });
        live.push((id, size));
        live_total += size;
    }
    if live.len() < 2 {
        return Err(Error::Config("bulk load produced fewer than two objects".into()));
    }
    let mut ledger = StorageAgeLedger { live_bytes: live_total, churned_bytes: 0 };
    phases.push(StreamPhase { kind: PhaseKind::BulkLoad, events: bulk, achieved_age: 0.0 });

    let mix = spec.churn_mix.delete_create;
    let mix_threshold = (mix * (u64::MAX as f64)) as u64;
    let mut age_from = 0.0f64;
    for &target in &spec.measurement_ages {
        let mut churn = Vec::new();
        while ledger.age().expect("live set non-empty") < target {
            let idx = (rng.next_u64() % live.len() as u64) as usize;
            let delete_create = mix > 0.0 && rng.next_u64() < mix_threshold;
            if delete_create {
                let (victim, old_size) = live.swap_remove(idx);
                churn.push(Event::Delete { id: victim });
                ledger.record_churn(old_size, -(old_size as i64))?;
                let size = spec.size_dist.sample(&mut rng);
                let id = ObjectId(next_id);
                next_id += 1;
                let tag = next_tag;
                next_tag += 1;
                churn.push(Event::Create { id, size, tag });
                live.push((id, size));
                ledger.record_churn(0, size as i64)?;
            } else {
                let (victim, old_size) = live[idx];
                let size = spec.size_dist.sample(&mut rng);
                let tag = next_tag;
                next_tag += 1;
                churn.push(Event::SafeWrite { id: victim, size, tag });
                live[idx].1 = size;
                ledger.record_churn(old_size, size as i64 - old_size as i64)?;
            }
        }
        let achieved = ledger.age().expect("live set non-empty");
        if !churn.is_empty() {
            phases.push(StreamPhase {
                kind: PhaseKind::Churn { age_from, age_to: target },
                events: churn,
                achieved_age: achieved,
            });
        }
        let reads = (0..spec.read_sample_count)
            .map(|_| {
                let idx = (rng.next_u64() % live.len() as u64) as usize;
                Event::Read { id: live[idx].0 }
            })
            .collect();
        phases.push(StreamPhase {
            kind: PhaseKind::ReadPass { age: target },
            events: reads,
            achieved_age: achieved,
        });
        age_from = target;
    }
    Ok(OperationStream { phases })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_1g_const_10m() -> WorkloadSpec {
        WorkloadSpec {
            seed: 1,
            size_dist: SizeDist::Constant { bytes: 10 * 1024 * 1024 },
            volume_capacity_bytes: 1 << 30,
            target_occupancy: 0.9,
            write_buffer_bytes: DEFAULT_WRITE_BUFFER,
            measurement_ages: vec![0.0],
            read_sample_count: 100,
            churn_mix: ChurnMix::default(),
        }
    }

    #[test]
    fn bulk_count_matches_budget_arithmetic() {
        // floor(0.9 * 2^30 / 10485760) = 92
        let stream = build_stream(&spec_1g_const_10m()).unwrap();
        let bulk = stream
            .events()
            .filter(|e| matches!(e, Event::BulkCreate { .. }))
            .count();
        assert_eq!(bulk, 92);
    }

    #[test]
    fn age_zero_stream_has_one_read_batch_no_churn() {
        let stream = build_stream(&spec_1g_const_10m()).unwrap();
        assert_eq!(stream.phases.len(), 2); // bulk + one read pass
        assert!(stream.events().all(|e| !matches!(e, Event::SafeWrite { .. })));
        let reads = stream.events().filter(|e| matches!(e, Event::Read { .. })).count();
        assert_eq!(reads, 100);
    }

    #[test]
    fn constant_churn_hits_ages_exactly() {
        let mut spec = spec_1g_const_10m();
        spec.measurement_ages = vec![0.0, 2.0, 4.0];
        let stream = build_stream(&spec).unwrap();
        for phase in &stream.phases {
            if let PhaseKind::ReadPass { age } = phase.kind {
                // Constant sizes: churned is an exact multiple of live, so the
                // achieved age equals the integer target with no rounding.
                assert_eq!(phase.achieved_age, age, "age target {age}");
            }
        }
        // Total safe-write bytes = 4 * live bytes, exactly (constant sizes).
        let live: u64 = 92 * 10 * 1024 * 1024;
        let churn_bytes: u64 = stream
            .events()
            .filter_map(|e| match e {
                Event::SafeWrite { size, .. } => Some(*size),
                _ => None,
            })
            .sum();
        assert_eq!(churn_bytes, 4 * live);
    }

    #[test]
    fn ledger_examples() {
        let mut l = StorageAgeLedger { live_bytes: 10 << 30, churned_bytes: 0 };
        assert_eq!(l.age(), Some(0.0));

        // Delete one 10MB object out of 100: churned 10MB, live 990MB.
        let mb = 1024 * 1024;
        let mut l2 = StorageAgeLedger { live_bytes: 1000 * mb, churned_bytes: 0 };
        l2.record_churn(10 * mb, -(10 * mb as i64)).unwrap();
        assert_eq!(l2.churned_bytes, 10 * mb);
        assert_eq!(l2.live_bytes, 990 * mb);
        assert!((l2.age().unwrap() - 10.0 / 990.0).abs() < 1e-12);

        // Live bytes can never go negative.
        assert!(l.record_churn(0, -(100i64 << 30)).is_err());
    }

    #[test]
    fn uniform_sampler_range_and_mean() {
        let m = 10 * 1024 * 1024u64;
        let dist = SizeDist::UniformAboutMean { mean_bytes: m };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000u64;
        let mut total = 0u64;
        for _ in 0..n {
            let s = dist.sample(&mut rng);
            assert!(s >= m / 2 && s <= 3 * m / 2, "sample {s} out of range");
            assert_eq!(s % 1024, 0);
            total += s;
        }
        let mean = total as f64 / n as f64;
        assert!(
            (mean - m as f64).abs() / (m as f64) < 0.01,
            "empirical mean {mean} vs {m}"
        );
    }

    #[test]
    fn uniform_grid_mean_is_exact_for_odd_kib_counts() {
        // mean 5 KiB: k in [3, 7], average 5 — exact on the grid.
        let dist = SizeDist::UniformAboutMean { mean_bytes: 5 * 1024 };
        assert_eq!(dist.upper_bound(), 7 * 1024);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..10_000 {
            seen.insert(dist.sample(&mut rng) / 1024);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn identical_specs_identical_streams() {
        let mut spec = spec_1g_const_10m();
        spec.measurement_ages = vec![0.0, 1.0];
        spec.size_dist = SizeDist::UniformAboutMean { mean_bytes: 10 * 1024 * 1024 };
        let a = build_stream(&spec).unwrap();
        let b = build_stream(&spec).unwrap();
        assert_eq!(a.digest_hex(), b.digest_hex());
        assert_eq!(a.event_count(), b.event_count());
        let mut spec2 = spec.clone();
        spec2.seed = 2;
        let c = build_stream(&spec2).unwrap();
        assert_ne!(a.digest_hex(), c.digest_hex());
    }

    #[test]
    fn selection_is_uniform_chi_square() {
        // Small constant objects, deep churn: >= 10^4 safe-writes over a
        // fixed live set. Chi-square against uniform within 5 sigma.
        let spec = WorkloadSpec {
            seed: 42,
            size_dist: SizeDist::Constant { bytes: 1024 },
            volume_capacity_bytes: 128 * 1024,
            target_occupancy: 0.85,
            write_buffer_bytes: 1024,
            measurement_ages: vec![120.0],
            read_sample_count: 1,
            churn_mix: ChurnMix::default(),
        };
        let stream = build_stream(&spec).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        let mut total = 0u64;
        for ev in stream.events() {
            if let Event::SafeWrite { id, .. } = ev {
                *counts.entry(*id).or_insert(0u64) += 1;
                total += 1;
            }
        }
        let n = counts.len() as f64;
        assert!(total >= 10_000, "need >= 10^4 safe-writes, got {total}");
        let expected = total as f64 / n;
        let chi2: f64 = counts.values().map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        }).sum();
        let dof = n - 1.0;
        let bound = dof + 5.0 * (2.0 * dof).sqrt();
        assert!(chi2 < bound, "chi2 {chi2} vs bound {bound}");
    }

    #[test]
    fn mixed_churn_keeps_ledger_consistent() {
        let spec = WorkloadSpec {
            seed: 9,
            size_dist: SizeDist::UniformAboutMean { mean_bytes: 64 * 1024 },
            volume_capacity_bytes: 16 << 20,
            target_occupancy: 0.8,
            write_buffer_bytes: 16 * 1024,
            measurement_ages: vec![1.5],
            read_sample_count: 10,
            churn_mix: ChurnMix { delete_create: 0.3 },
        };
        let stream = build_stream(&spec).unwrap();
        let deletes = stream.events().filter(|e| matches!(e, Event::Delete { .. })).count();
        let creates = stream.events().filter(|e| matches!(e, Event::Create { .. })).count();
        assert_eq!(deletes, creates);
        assert!(deletes > 0, "mix 0.3 should produce delete/create pairs");
        // Achieved age overshoots the target by at most one object quantum.
        let phase = stream.phases.iter().find(|p| matches!(p.kind, PhaseKind::Churn { .. })).unwrap();
        let quantum = spec.size_dist.upper_bound() as f64 / (0.5 * spec.bulk_budget_bytes() as f64);
        assert!(phase.achieved_age >= 1.5 && phase.achieved_age < 1.5 + quantum);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec_1g_const_10m();
        s.target_occupancy = 1.2;
        assert!(s.validate().is_err());
        let mut s = spec_1g_const_10m();
        s.write_buffer_bytes = 1000;
        assert!(s.validate().is_err());
        let mut s = spec_1g_const_10m();
        s.size_dist = SizeDist::Constant { bytes: 0 };
        assert!(s.validate().is_err());
        let mut s = spec_1g_const_10m();
        s.volume_capacity_bytes = 16 * 1024 * 1024; // can't fit two 10MB objects at 0.9
        assert!(s.validate().is_err());
        let mut s = spec_1g_const_10m();
        s.measurement_ages = vec![2.0, 2.0];
        assert!(s.validate().is_err());
    }
}
