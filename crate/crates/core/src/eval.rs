//! Metrics, inference timing and report files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{total_mass, GridError, GridSpec, SpeciesField};
use crate::unet::{UNet, UnetError};
use crate::xform::{NormParams, PatchId, RootSpec, ValueRange, XformError, ROOT_EXCEEDANCE_EPS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {what} has {got} values, expected {expected}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("mass undefined for species {species}: every truth patch has zero mass")]
    MassUndefined { species: u32 },
    #[error("histogram of an empty sample")]
    EmptyHistogram,
    #[error("histogram needs finite values and at least one bin")]
    BadHistogram,
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Xform(#[from] XformError),
    #[error(transparent)]
    Network(#[from] UnetError),
    #[error("report: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseConvention {
    /// Compare reconstructed outputs `input + sign(t)·|t|^n` in the min-max
    /// normalized space.
    NormalizedOutput,
    /// Compare root-space targets directly.
    RootSpace,
}

/// Root-mean-square errors per stratum. A stratum without samples has no
/// value rather than zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratifiedRmse {
    pub all: Option<f64>,
    pub extreme: Option<f64>,
    pub nonextreme: Option<f64>,
    pub samples_extreme: u64,
    pub samples_nonextreme: u64,
    pub cells_extreme: u64,
    pub cells_nonextreme: u64,
}

impl StratifiedRmse {
    pub fn samples_all(&self) -> u64 {
        self.samples_extreme + self.samples_nonextreme
    }

    pub fn cells_all(&self) -> u64 {
        self.cells_extreme + self.cells_nonextreme
    }
}

/// Streaming sums of squared errors, split by stratum.
#[derive(Debug, Clone, Copy)]
pub struct RmseAccumulator {
    convention: RmseConvention,
    root: RootSpec,
    sse: [f64; 2],
    cells: [u64; 2],
    samples: [u64; 2],
}

impl RmseAccumulator {
    pub fn new(convention: RmseConvention, root: RootSpec) -> Self {
        Self { convention, root, sse: [0.0; 2], cells: [0; 2], samples: [0; 2] }
    }

    /// Add one sample. `input` is the normalized concentration channel and
    /// is only read by the reconstructed-output convention.
    pub fn add(&mut self, input: &[f32], pred: &[f32], target: &[f32], extreme: bool) {
        let s = extreme as usize;
        let mut sse = 0.0;
        match self.convention {
            RmseConvention::RootSpace => {
                for (&p, &t) in pred.iter().zip(target) {
                    let e = p as f64 - t as f64;
                    sse += e * e;
                }
            }
            RmseConvention::NormalizedOutput => {
                for ((&x, &p), &t) in input.iter().zip(pred).zip(target) {
                    let x = x as f64;
                    let e = (x + self.root.power(p as f64)) - (x + self.root.power(t as f64));
                    sse += e * e;
                }
            }
        }
        self.sse[s] += sse;
        self.cells[s] += pred.len() as u64;
        self.samples[s] += 1;
    }

    pub fn finish(&self) -> StratifiedRmse {
        let rmse = |sse: f64, n: u64| (n > 0).then(|| (sse / n as f64).sqrt());
        StratifiedRmse {
            all: rmse(self.sse[0] + self.sse[1], self.cells[0] + self.cells[1]),
            extreme: rmse(self.sse[1], self.cells[1]),
            nonextreme: rmse(self.sse[0], self.cells[0]),
            samples_extreme: self.samples[1],
            samples_nonextreme: self.samples[0],
            cells_extreme: self.cells[1],
            cells_nonextreme: self.cells[0],
        }
    }
}

/// Stratified RMSE over aligned per-sample arrays of `cells` values each.
pub fn rmse_stratified(
    preds: &[f32],
    targets: &[f32],
    inputs: &[f32],
    extreme: &[bool],
    convention: RmseConvention,
    root: RootSpec,
) -> Result<StratifiedRmse, EvalError> {
    let n = extreme.len();
    if n == 0 {
        return Ok(RmseAccumulator::new(convention, root).finish());
    }
    let cells = preds.len() / n;
    for (what, got) in [("predictions", preds.len()), ("targets", targets.len()), ("inputs", inputs.len())] {
        if got != n * cells || cells == 0 {
            return Err(EvalError::Length { what, expected: n * cells.max(1), got });
        }
    }
    let mut acc = RmseAccumulator::new(convention, root);
    for (s, &ext) in extreme.iter().enumerate() {
        let r = s * cells..(s + 1) * cells;
        acc.add(&inputs[r.clone()], &preds[r.clone()], &targets[r], ext);
    }
    Ok(acc.finish())
}

/// `|rmse_all² N_all − (rmse_ext² N_ext + rmse_non² N_non)|` relative to
/// the left side.
pub fn stratification_residual(r: &StratifiedRmse) -> f64 {
    let sq = |v: Option<f64>, n: u64| v.map_or(0.0, |v| v * v * n as f64);
    let lhs = sq(r.all, r.cells_all());
    let rhs = sq(r.extreme, r.cells_extreme) + sq(r.nonextreme, r.cells_nonextreme);
    if lhs == 0.0 {
        rhs.abs()
    } else {
        (lhs - rhs).abs() / lhs
    }
}

/// Percent mass difference of one patch after mapping both fields back to
/// physical units. `None` when the truth has zero mass.
pub fn mass_pct_diff(
    pred_norm: &SpeciesField,
    truth_norm: &SpeciesField,
    params: &NormParams,
    patch: Option<PatchId>,
    grid: &GridSpec,
) -> Result<Option<f64>, EvalError> {
    let pred = params.invert(pred_norm, patch, ValueRange::UNIT)?;
    let truth = params.invert(truth_norm, patch, ValueRange::UNIT)?;
    let mp = total_mass(&pred, grid)?;
    let mt = total_mass(&truth, grid)?;
    if mt == 0.0 {
        return Ok(None);
    }
    Ok(Some(100.0 * (mp - mt).abs() / mt.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassSummary {
    pub species_id: u32,
    pub mean_pct_diff: f64,
    pub patches: u64,
    pub excluded_zero_truth: u64,
}

/// Running mean of per-patch mass differences for one species.
#[derive(Debug, Clone, Copy)]
pub struct MassAccumulator {
    species_id: u32,
    sum: f64,
    patches: u64,
    excluded: u64,
}

impl MassAccumulator {
    pub fn new(species_id: u32) -> Self {
        Self { species_id, sum: 0.0, patches: 0, excluded: 0 }
    }

    pub fn add(&mut self, pct: Option<f64>) {
        match pct {
            Some(p) => {
                self.sum += p;
                self.patches += 1;
            }
            None => self.excluded += 1,
        }
    }

    pub fn finish(&self) -> Result<MassSummary, EvalError> {
        if self.patches == 0 {
            return Err(EvalError::MassUndefined { species: self.species_id });
        }
        Ok(MassSummary {
            species_id: self.species_id,
            mean_pct_diff: self.sum / self.patches as f64,
            patches: self.patches,
            excluded_zero_truth: self.excluded,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub device: String,
    pub arch: String,
    pub os: String,
    pub threads: usize,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            device: "cpu".into(),
            arch: std::env::consts::ARCH.into(),
            os: std::env::consts::OS.into(),
            threads: rayon::current_num_threads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub batch_size: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub ms_per_batch: f64,
    pub ms_min: f64,
    pub ms_max: f64,
    pub environment: Environment,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median wall-clock time of a forward pass over a batch of `batch_size`
/// inputs, after `warmup` untimed runs.
pub fn bench_inference(model: &UNet<f32>, batch_size: usize, warmup: usize, repeats: usize) -> Result<BenchResult, EvalError> {
    let len = batch_size * model.config().input_len();
    let inputs: Vec<f32> = (0..len).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
    for _ in 0..warmup {
        model.forward(&inputs, batch_size)?;
    }
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let out = model.forward(&inputs, batch_size)?;
        times.push(start.elapsed().as_secs_f64() * 1000.0);
        std::hint::black_box(out);
    }
    let ms_min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let ms_max = times.iter().copied().fold(0.0, f64::max);
    Ok(BenchResult {
        batch_size,
        warmup,
        repeats: times.len(),
        ms_per_batch: median(&mut times),
        ms_min,
        ms_max,
        environment: Environment::current(),
    })
}

/// Full-domain size for runtime extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub rows: usize,
    pub cols: usize,
    pub levels: usize,
    pub patch_depth: usize,
    pub species: usize,
    pub batch_size: usize,
}

impl DomainSpec {
    /// The continental domain: 4×6 patches, 64 levels, 183 species.
    pub fn conus() -> Self {
        Self { rows: 4, cols: 6, levels: 64, patch_depth: 16, species: 183, batch_size: 32 }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let fields = [self.rows, self.cols, self.levels, self.patch_depth, self.species, self.batch_size];
        if fields.contains(&0) {
            return Err(EvalError::Domain(format!("every field must be positive: {self:?}")));
        }
        if self.levels % self.patch_depth != 0 {
            return Err(EvalError::Domain(format!("{} levels are not divisible by patch depth {}", self.levels, self.patch_depth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeEstimate {
    pub domain: DomainSpec,
    pub ms_per_batch: f64,
    pub total_patches: usize,
    pub batches: usize,
    pub seconds_per_timestep: f64,
}

pub fn extrapolate_runtime(ms_per_batch: f64, d: &DomainSpec) -> Result<RuntimeEstimate, EvalError> {
    d.validate()?;
    let total_patches = d.rows * d.cols * (d.levels / d.patch_depth) * d.species;
    let batches = total_patches.div_ceil(d.batch_size);
    Ok(RuntimeEstimate {
        domain: d.clone(),
        ms_per_batch,
        total_patches,
        batches,
        seconds_per_timestep: batches as f64 * ms_per_batch / 1000.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    /// Hint that the counts are meant for a log-scaled axis.
    pub log_y: bool,
    /// Values outside `[lo, hi]`, not binned.
    pub outside: u64,
}

impl Histogram {
    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + b as f64 * w, if b + 1 == self.counts.len() { self.hi } else { self.lo + (b + 1) as f64 * w })
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Distance from the first to the last occupied bin, in bins.
    pub fn occupied_span(&self) -> usize {
        let first = self.counts.iter().position(|&c| c > 0);
        let last = self.counts.iter().rposition(|&c| c > 0);
        match (first, last) {
            (Some(a), Some(b)) => b - a + 1,
            _ => 0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_edges(b);
            s.push_str(&format!("{lo},{hi},{c}\n"));
        }
        s
    }
}

/// Fixed-width histogram over `range`, or over `[min, max]` of the values.
/// The last bin is closed on the right.
pub fn histogram(values: &[f64], bins: usize, range: Option<(f64, f64)>, log_y: bool) -> Result<Histogram, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyHistogram);
    }
    if bins == 0 || values.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::BadHistogram);
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    let mut counts = vec![0u64; bins];
    let mut outside = 0;
    for &v in values {
        if v < lo || v > hi {
            outside += 1;
            continue;
        }
        let b = if hi > lo { (((v - lo) / (hi - lo)) * bins as f64) as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    Ok(Histogram { lo, hi, counts, log_y, outside })
}

/// One histogram as CSV rows.
pub fn histogram_csv(values: &[f64], bins: usize, log_y: bool) -> Result<String, EvalError> {
    Ok(histogram(values, bins, None, log_y)?.to_csv())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionReport {
    pub model: StratifiedRmse,
    pub persistence: StratifiedRmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub bench: BenchResult,
    pub configured: RuntimeEstimate,
    pub conus: RuntimeEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub normalized_output: ConventionReport,
    pub root_space: ConventionReport,
    pub mass: Vec<MassSummary>,
    /// Predictions beyond `±(1 + ROOT_EXCEEDANCE_EPS)` in root space.
    pub range_exceedances: u64,
    pub root_n: u32,
    pub timing: Option<Timing>,
    pub checksums: Vec<(String, String)>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Reduction in reconstructed-output RMSE relative to persistence.
    pub fn skill_vs_persistence(&self) -> Option<f64> {
        let r = &self.normalized_output;
        Some(1.0 - r.model.all? / r.persistence.all?)
    }

    pub fn mean_mass_pct_diff(&self) -> Option<f64> {
        (!self.mass.is_empty()).then(|| self.mass.iter().map(|m| m.mean_pct_diff).sum::<f64>() / self.mass.len() as f64)
    }

    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.5}"));
        let mut s = String::new();
        for (name, r) in [("reconstructed output (normalized)", &self.normalized_output), ("root space", &self.root_space)] {
            s.push_str(&format!("RMSE, {name}, root n = {}\n", self.root_n));
            s.push_str(&format!("  {:<12} {:>10} {:>10} {:>10}\n", "", "non-extreme", "extreme", "all"));
            for (label, m) in [("model", &r.model), ("persistence", &r.persistence)] {
                s.push_str(&format!("  {:<12} {:>10} {:>10} {:>10}\n", label, f(m.nonextreme), f(m.extreme), f(m.all)));
            }
            s.push_str(&format!(
                "  samples: {} non-extreme, {} extreme, {} total\n",
                r.model.samples_nonextreme,
                r.model.samples_extreme,
                r.model.samples_all()
            ));
        }
        if let Some(skill) = self.skill_vs_persistence() {
            s.push_str(&format!("improvement over persistence: {:.1}%\n", 100.0 * skill));
        }
        s.push_str(&format!("root-space predictions beyond ±{}: {}\n", 1.0 + ROOT_EXCEEDANCE_EPS, self.range_exceedances));
        for m in &self.mass {
            s.push_str(&format!(
                "mass difference, species {}: {:.4}% over {} patches ({} zero-mass excluded)\n",
                m.species_id, m.mean_pct_diff, m.patches, m.excluded_zero_truth
            ));
        }
        if let Some(mean) = self.mean_mass_pct_diff() {
            s.push_str(&format!("mass difference, mean over species: {mean:.4}%\n"));
        }
        if let Some(t) = &self.timing {
            s.push_str(&format!(
                "inference: {:.2} ms per batch of {} ({} threads)\n",
                t.bench.ms_per_batch, t.bench.batch_size, t.bench.environment.threads
            ));
            for (label, e) in [("configured domain", &t.configured), ("continental domain", &t.conus)] {
                s.push_str(&format!("  {label}: {} batches, {:.2} s per timestep\n", e.batches, e.seconds_per_timestep));
            }
        }
        s
    }
}

/// Write `report.json` and `summary.txt` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join("report.json");
    let text = dir.join("summary.txt");
    std::fs::write(&json, serde_json::to_string_pretty(report)?)?;
    std::fs::write(&text, report.summary())?;
    Ok(vec![json, text])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpeciesKind;
    use crate::xform::{minmax_fit, NormMode};
    use proptest::prelude::*;

    #[test]
    fn identical_predictions_score_zero() {
        let t = [0.1f32, -0.4, 0.3, 0.0];
        let x = [0.5f32; 4];
        for conv in [RmseConvention::RootSpace, RmseConvention::NormalizedOutput] {
            let r = rmse_stratified(&t, &t, &x, &[true, false], conv, RootSpec::CUBE).unwrap();
            assert_eq!(r.all, Some(0.0));
            assert_eq!(r.extreme, Some(0.0));
        }
    }

    #[test]
    fn single_cell_error() {
        let r = rmse_stratified(&[0.5], &[0.0], &[0.0], &[false], RmseConvention::RootSpace, RootSpec::CUBE).unwrap();
        assert_eq!(r.all, Some(0.5));
        assert_eq!(r.extreme, None);
        assert_eq!(r.samples_extreme, 0);
    }

    #[test]
    fn empty_strata_are_absent() {
        let r = rmse_stratified(&[], &[], &[], &[], RmseConvention::RootSpace, RootSpec::CUBE).unwrap();
        assert_eq!((r.all, r.extreme, r.nonextreme), (None, None, None));
    }

    fn brute_force(preds: &[f32], targets: &[f32], inputs: &[f32], ext: &[bool], conv: RmseConvention) -> [Option<f64>; 3] {
        let cells = preds.len() / ext.len();
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        for i in 0..preds.len() {
            let e = match conv {
                RmseConvention::RootSpace => preds[i] as f64 - targets[i] as f64,
                RmseConvention::NormalizedOutput => {
                    let x = inputs[i] as f64;
                    (x + (preds[i] as f64).powi(3)) - (x + (targets[i] as f64).powi(3))
                }
            };
            let stratum = if ext[i / cells] { 1 } else { 2 };
            for s in [0, stratum] {
                sums[s] += e * e;
                counts[s] += 1;
            }
        }
        [0, 1, 2].map(|s| (counts[s] > 0).then(|| (sums[s] / counts[s] as f64).sqrt()))
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_decomposes(
            data in proptest::collection::vec((-1.0f32..1.0, -1.0f32..1.0, 0.0f32..1.0), 6..60),
            flags in proptest::collection::vec(any::<bool>(), 3),
        ) {
            let cells = data.len() / 3;
            let data = &data[..cells * 3];
            let preds: Vec<f32> = data.iter().map(|d| d.0).collect();
            let targets: Vec<f32> = data.iter().map(|d| d.1).collect();
            let inputs: Vec<f32> = data.iter().map(|d| d.2).collect();
            for conv in [RmseConvention::RootSpace, RmseConvention::NormalizedOutput] {
                let r = rmse_stratified(&preds, &targets, &inputs, &flags, conv, RootSpec::CUBE).unwrap();
                let want = brute_force(&preds, &targets, &inputs, &flags, conv);
                for (got, want) in [r.all, r.extreme, r.nonextreme].iter().zip(want) {
                    match (got, want) {
                        (Some(g), Some(w)) => prop_assert!((g - w).abs() <= 1e-12 * w.max(1.0)),
                        (None, None) => {}
                        other => prop_assert!(false, "{other:?}"),
                    }
                }
                prop_assert!(stratification_residual(&r) <= 1e-10);
            }
        }
    }

    fn patch_setup() -> (GridSpec, NormParams, SpeciesField) {
        let g = GridSpec::new(2, 2, 2, 1000.0, 1000.0, vec![10.0, 30.0]).unwrap();
        let lo = SpeciesField::filled([2, 2, 2], 0.0, 0, SpeciesKind::Pm);
        let hi = SpeciesField::filled([2, 2, 2], 20.0, 0, SpeciesKind::Pm);
        let params = minmax_fit([(&lo, None), (&hi, None)], NormMode::PerSpeciesPerLevel).unwrap();
        let truth = SpeciesField::from_fn([2, 2, 2], 0, SpeciesKind::Pm, |i, j, k| 0.1 + 0.1 * (i + j + k) as f64);
        (g, params, truth)
    }

    #[test]
    fn mass_identity_and_linearity() {
        let (g, params, truth) = patch_setup();
        assert_eq!(mass_pct_diff(&truth, &truth, &params, None, &g).unwrap(), Some(0.0));
        let pred = truth.map(|v| v * 1.01);
        let pct = mass_pct_diff(&pred, &truth, &params, None, &g).unwrap().unwrap();
        assert!((pct - 1.0).abs() < 1e-12, "{pct}");
    }

    #[test]
    fn zero_truth_patches_are_excluded() {
        let (g, params, truth) = patch_setup();
        let zero = truth.map(|_| 0.0);
        assert_eq!(mass_pct_diff(&truth, &zero, &params, None, &g).unwrap(), None);
        let mut acc = MassAccumulator::new(0);
        acc.add(None);
        assert!(matches!(acc.finish(), Err(EvalError::MassUndefined { species: 0 })));
        acc.add(Some(2.0));
        acc.add(Some(4.0));
        let m = acc.finish().unwrap();
        assert_eq!((m.mean_pct_diff, m.patches, m.excluded_zero_truth), (3.0, 2, 1));
    }

    #[test]
    fn continental_extrapolation() {
        let e = extrapolate_runtime(4.74, &DomainSpec::conus()).unwrap();
        assert_eq!(e.batches, 549);
        assert!((e.seconds_per_timestep - 2.6).abs() / 2.6 < 0.01);
        let one = DomainSpec { rows: 1, cols: 1, levels: 16, patch_depth: 16, species: 1, batch_size: 32 };
        assert_eq!(extrapolate_runtime(7.5, &one).unwrap().seconds_per_timestep, 0.0075);
        let bad = DomainSpec { levels: 60, ..DomainSpec::conus() };
        assert!(matches!(extrapolate_runtime(1.0, &bad), Err(EvalError::Domain(_))));
    }

    #[test]
    fn batches_grow_with_species() {
        let mut last = 0;
        for species in 1..200 {
            let b = extrapolate_runtime(1.0, &DomainSpec { species, ..DomainSpec::conus() }).unwrap().batches;
            assert!(b >= last);
            last = b;
        }
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[0.0, 1.0], 2, None, false).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.to_csv(), "bin_lo,bin_hi,count\n0,0.5,1\n0.5,1,1\n");
        let flat = histogram(&[3.0; 5], 4, None, true).unwrap();
        assert_eq!(flat.occupied_bins(), 1);
        assert!(matches!(histogram(&[], 4, None, false), Err(EvalError::EmptyHistogram)));
        let fixed = histogram(&[-2.0, 0.0, 0.99], 4, Some((-1.0, 1.0)), false).unwrap();
        assert_eq!((fixed.counts.clone(), fixed.outside), (vec![0, 0, 1, 1], 1));
    }

    #[test]
    fn median_is_robust() {
        assert_eq!(median(&mut [5.0, 1.0, 100.0]), 5.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn bench_reports_environment() {
        let cfg = crate::unet::UNetConfig { levels: 1, base_channels: 2, in_channels: 1, patch_dims: [4, 4, 2], ..Default::default() };
        let model = UNet::<f32>::build(&cfg).unwrap();
        let one = bench_inference(&model, 2, 1, 1).unwrap();
        let many = bench_inference(&model, 2, 1, 9).unwrap();
        assert_eq!((one.repeats, many.repeats), (1, 9));
        assert!(many.ms_min <= many.ms_per_batch && many.ms_per_batch <= many.ms_max);
        assert!(one.environment.threads >= 1);
    }
}
