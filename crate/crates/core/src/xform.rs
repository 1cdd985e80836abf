//! Normalization and learning-target transforms.
//!
//! Min-max normalization is affine per group, so it commutes with linear
//! transport and with any scheme that reproduces constants. The learning
//! target is the signed n'th root of the normalized one-step change.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::SpeciesField;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum XformError {
    #[error("no finite values to fit group {0}")]
    EmptyGroup(GroupKey),
    #[error("no normalization parameters for group {0}")]
    MissingParams(GroupKey),
    #[error("per-patch normalization needs a patch identity")]
    MissingPatchId,
    #[error("length mismatch: {left} vs {right} values")]
    LengthMismatch { left: usize, right: usize },
    #[error("affine scale must be finite and non-zero, got {0}")]
    ZeroScale(f64),
    #[error("root order must be odd and positive, got {0}")]
    EvenRoot(u32),
    #[error("{count} values fall at or below zero before the log transform")]
    LogDomain { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    PerSpecies,
    PerSpeciesPerLevel,
    PerPatch,
}

/// Identity of one horizontal patch at one transport timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchId {
    pub time_index: u32,
    pub row: u32,
    pub col: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub species_id: u32,
    pub level: Option<u32>,
    pub patch: Option<PatchId>,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "species {}", self.species_id)?;
        if let Some(level) = self.level {
            write!(f, " level {level}")?;
        }
        if let Some(p) = self.patch {
            write!(f, " patch t={} ({}, {})", p.time_index, p.row, p.col)?;
        }
        Ok(())
    }
}

impl NormMode {
    pub fn key(self, species_id: u32, level: usize, patch: Option<PatchId>) -> Result<GroupKey, XformError> {
        Ok(match self {
            NormMode::PerSpecies => GroupKey { species_id, level: None, patch: None },
            NormMode::PerSpeciesPerLevel => GroupKey { species_id, level: Some(level as u32), patch: None },
            NormMode::PerPatch => GroupKey {
                species_id,
                level: Some(level as u32),
                patch: Some(patch.ok_or(XformError::MissingPatchId)?),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn is_degenerate(&self) -> bool {
        self.max == self.min
    }
}

/// Target interval of a min-max map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };
    /// `[1, e]`, so that a following natural log lands in `[0, 1]`.
    pub const LOG: ValueRange = ValueRange { lo: 1.0, hi: std::f64::consts::E };
}

/// Per-group minima and maxima. Immutable once fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NormParamsRepr", try_from = "NormParamsRepr")]
pub struct NormParams {
    pub mode: NormMode,
    pub groups: BTreeMap<GroupKey, MinMax>,
}

#[derive(Serialize, Deserialize)]
struct NormEntry {
    #[serde(flatten)]
    key: GroupKey,
    min: f64,
    max: f64,
    degenerate: bool,
}

#[derive(Serialize, Deserialize)]
struct NormParamsRepr {
    mode: NormMode,
    groups: Vec<NormEntry>,
}

impl From<NormParams> for NormParamsRepr {
    fn from(p: NormParams) -> Self {
        let groups = p
            .groups
            .into_iter()
            .map(|(key, mm)| NormEntry { key, min: mm.min, max: mm.max, degenerate: mm.is_degenerate() })
            .collect();
        NormParamsRepr { mode: p.mode, groups }
    }
}

impl TryFrom<NormParamsRepr> for NormParams {
    type Error = String;

    fn try_from(r: NormParamsRepr) -> Result<Self, Self::Error> {
        let mut groups = BTreeMap::new();
        for e in r.groups {
            if !(e.max >= e.min) {
                return Err(format!("group {} has max {} below min {}", e.key, e.max, e.min));
            }
            groups.insert(e.key, MinMax { min: e.min, max: e.max });
        }
        Ok(NormParams { mode: r.mode, groups })
    }
}

/// Streaming min/max accumulator.
#[derive(Debug, Clone)]
pub struct NormFitter {
    mode: NormMode,
    seen: BTreeMap<GroupKey, Option<MinMax>>,
}

impl NormFitter {
    pub fn new(mode: NormMode) -> Self {
        Self { mode, seen: BTreeMap::new() }
    }

    pub fn observe(&mut self, field: &SpeciesField, patch: Option<PatchId>) -> Result<(), XformError> {
        let nz = field.dims[2];
        for k in 0..nz {
            let key = self.mode.key(field.species_id, k, patch)?;
            let slot = self.seen.entry(key).or_insert(None);
            for v in field.level_values(k).filter(|v| v.is_finite()) {
                match slot {
                    Some(mm) => {
                        mm.min = mm.min.min(v);
                        mm.max = mm.max.max(v);
                    }
                    None => *slot = Some(MinMax { min: v, max: v }),
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<NormParams, XformError> {
        let mut groups = BTreeMap::new();
        for (key, mm) in self.seen {
            groups.insert(key, mm.ok_or(XformError::EmptyGroup(key))?);
        }
        Ok(NormParams { mode: self.mode, groups })
    }
}

pub fn minmax_fit<'a>(
    fields: impl IntoIterator<Item = (&'a SpeciesField, Option<PatchId>)>,
    mode: NormMode,
) -> Result<NormParams, XformError> {
    let mut fitter = NormFitter::new(mode);
    for (field, patch) in fields {
        fitter.observe(field, patch)?;
    }
    fitter.finish()
}

/// Result of a forward min-max map.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub field: SpeciesField,
    /// Values outside the fitted `[min, max]`. They are mapped linearly,
    /// not clipped.
    pub exceedances: usize,
}

impl NormParams {
    pub fn get(&self, species_id: u32, level: usize, patch: Option<PatchId>) -> Result<MinMax, XformError> {
        let key = self.mode.key(species_id, level, patch)?;
        self.groups.get(&key).copied().ok_or(XformError::MissingParams(key))
    }

    /// Per-level `(min, max)` for a field, resolved once.
    fn level_params(&self, field: &SpeciesField, patch: Option<PatchId>) -> Result<Vec<MinMax>, XformError> {
        (0..field.dims[2]).map(|k| self.get(field.species_id, k, patch)).collect()
    }

    pub fn apply(&self, field: &SpeciesField, patch: Option<PatchId>, range: ValueRange) -> Result<Normalized, XformError> {
        let levels = self.level_params(field, patch)?;
        let nz = field.dims[2];
        let mut exceedances = 0;
        let values = field
            .values
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let mm = levels[idx % nz];
                if v < mm.min || v > mm.max {
                    exceedances += 1;
                }
                if mm.is_degenerate() {
                    range.lo
                } else {
                    range.lo + (v - mm.min) / (mm.max - mm.min) * (range.hi - range.lo)
                }
            })
            .collect();
        Ok(Normalized { field: field.with_values(values), exceedances })
    }

    pub fn invert(&self, field: &SpeciesField, patch: Option<PatchId>, range: ValueRange) -> Result<SpeciesField, XformError> {
        let levels = self.level_params(field, patch)?;
        let nz = field.dims[2];
        let values = field
            .values
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let mm = levels[idx % nz];
                mm.min + (v - range.lo) / (range.hi - range.lo) * (mm.max - mm.min)
            })
            .collect();
        Ok(field.with_values(values))
    }
}

pub fn minmax_apply(
    c: &SpeciesField,
    params: &NormParams,
    patch: Option<PatchId>,
    range: ValueRange,
) -> Result<Normalized, XformError> {
    params.apply(c, patch, range)
}

pub fn minmax_invert(
    c: &SpeciesField,
    params: &NormParams,
    patch: Option<PatchId>,
    range: ValueRange,
) -> Result<SpeciesField, XformError> {
    params.invert(c, patch, range)
}

/// `c' = ln(minmax_[1,e](c))`, which lies in `[0, 1]` on fitted data.
pub fn log_chain_apply(c: &SpeciesField, patch: Option<PatchId>, params: &NormParams) -> Result<SpeciesField, XformError> {
    let scaled = params.apply(c, patch, ValueRange::LOG)?.field;
    let count = scaled.values.iter().filter(|&&v| v <= 0.0).count();
    if count > 0 {
        return Err(XformError::LogDomain { count });
    }
    Ok(scaled.map(f64::ln))
}

pub fn log_chain_invert(c: &SpeciesField, patch: Option<PatchId>, params: &NormParams) -> Result<SpeciesField, XformError> {
    params.invert(&c.map(f64::exp), patch, ValueRange::LOG)
}

/// Order of the signed root applied to normalized differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct RootSpec(u32);

impl RootSpec {
    pub const CUBE: RootSpec = RootSpec(3);
    /// The family swept when comparing root orders.
    pub const SWEEP: [u32; 6] = [1, 3, 5, 7, 9, 15];

    pub fn new(n: u32) -> Result<Self, XformError> {
        if n % 2 == 1 {
            Ok(Self(n))
        } else {
            Err(XformError::EvenRoot(n))
        }
    }

    pub fn n(self) -> u32 {
        self.0
    }

    /// `sign(d)·|d|^(1/n)`.
    #[inline]
    pub fn root(self, d: f64) -> f64 {
        match self.0 {
            1 => d,
            3 => d.cbrt(),
            n => d.signum() * d.abs().powf(1.0 / n as f64),
        }
    }

    /// `sign(t)·|t|^n`, the inverse of [`RootSpec::root`].
    #[inline]
    pub fn power(self, t: f64) -> f64 {
        t.signum() * t.abs().powi(self.0 as i32)
    }
}

impl TryFrom<u32> for RootSpec {
    type Error = XformError;

    fn try_from(n: u32) -> Result<Self, Self::Error> {
        Self::new(n)
    }
}

impl From<RootSpec> for u32 {
    fn from(r: RootSpec) -> u32 {
        r.0
    }
}

impl Default for RootSpec {
    fn default() -> Self {
        Self::CUBE
    }
}

/// Learning target `sign(d)·|d|^(1/n)` with `d = output - input`.
pub fn root_diff_target(input: &[f64], output: &[f64], n: RootSpec) -> Result<Vec<f64>, XformError> {
    if input.len() != output.len() {
        return Err(XformError::LengthMismatch { left: input.len(), right: output.len() });
    }
    Ok(input.iter().zip(output).map(|(a, b)| n.root(b - a)).collect())
}

/// Targets beyond `1 + ROOT_EXCEEDANCE_EPS` in magnitude are counted and
/// warned about.
pub const ROOT_EXCEEDANCE_EPS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct RootInversion {
    pub output: Vec<f64>,
    pub exceedances: usize,
}

/// Reconstruct `input + sign(t)·|t|^n`.
pub fn root_diff_invert(input: &[f64], target: &[f64], n: RootSpec) -> Result<RootInversion, XformError> {
    if input.len() != target.len() {
        return Err(XformError::LengthMismatch { left: input.len(), right: target.len() });
    }
    let exceedances = target.iter().filter(|t| t.abs() > 1.0 + ROOT_EXCEEDANCE_EPS).count();
    if exceedances > 0 {
        log::warn!("{exceedances} root-space values exceed ±{}", 1.0 + ROOT_EXCEEDANCE_EPS);
    }
    let output = input.iter().zip(target).map(|(x, t)| x + n.power(*t)).collect();
    Ok(RootInversion { output, exceedances })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    a: f64,
    b: f64,
}

impl AffineParams {
    pub fn new(a: f64, b: f64) -> Result<Self, XformError> {
        if a == 0.0 || !a.is_finite() || !b.is_finite() {
            return Err(XformError::ZeroScale(a));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn apply(&self, c: &SpeciesField) -> SpeciesField {
        c.map(|v| self.a * v + self.b)
    }

    pub fn invert(&self, c: &SpeciesField) -> SpeciesField {
        c.map(|v| (v - self.b) / self.a)
    }
}

pub fn affine_apply(c: &SpeciesField, ap: &AffineParams) -> SpeciesField {
    ap.apply(c)
}

pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpeciesKind;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn column(values: &[f64]) -> SpeciesField {
        SpeciesField::new([values.len(), 1, 1], values.to_vec(), 4, SpeciesKind::Ozone).unwrap()
    }

    #[test]
    fn fit_single_group() {
        let c = column(&[2.0, 4.0, 6.0]);
        let p = minmax_fit([(&c, None)], NormMode::PerSpecies).unwrap();
        assert_eq!(p.get(4, 0, None).unwrap(), MinMax { min: 2.0, max: 6.0 });
    }

    #[test]
    fn constant_group_is_degenerate() {
        let c = column(&[5.0, 5.0]);
        let p = minmax_fit([(&c, None)], NormMode::PerSpecies).unwrap();
        assert!(p.get(4, 0, None).unwrap().is_degenerate());
        let out = p.apply(&c, None, ValueRange::UNIT).unwrap();
        assert_eq!(out.field.values, vec![0.0, 0.0]);
    }

    #[test]
    fn per_level_fit_matches_scan() {
        let c = SpeciesField::from_fn([3, 4, 2], 1, SpeciesKind::Pm, |i, j, k| ((i * 5 + j * 3) % 7) as f64 * (k + 1) as f64 + k as f64);
        let p = minmax_fit([(&c, None)], NormMode::PerSpeciesPerLevel).unwrap();
        let (l0, l1) = (p.get(1, 0, None).unwrap(), p.get(1, 1, None).unwrap());
        assert_ne!(l0, l1);
        for (k, mm) in [(0, l0), (1, l1)] {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..3 {
                for j in 0..4 {
                    lo = lo.min(c.get(i, j, k));
                    hi = hi.max(c.get(i, j, k));
                }
            }
            assert_eq!(mm, MinMax { min: lo, max: hi });
        }
    }

    #[test]
    fn empty_group_named() {
        let c = column(&[f64::NAN]);
        let err = minmax_fit([(&c, None)], NormMode::PerSpeciesPerLevel).unwrap_err();
        assert_eq!(err.to_string(), "no finite values to fit group species 4 level 0");
    }

    #[test]
    fn per_patch_needs_identity() {
        let c = column(&[1.0]);
        assert_eq!(minmax_fit([(&c, None)], NormMode::PerPatch).unwrap_err(), XformError::MissingPatchId);
        let id = PatchId { time_index: 2, row: 1, col: 3 };
        let p = minmax_fit([(&c, Some(id))], NormMode::PerPatch).unwrap();
        assert!(p.get(4, 0, Some(id)).is_ok());
        let other = PatchId { row: 0, ..id };
        assert!(matches!(p.get(4, 0, Some(other)), Err(XformError::MissingParams(_))));
    }

    #[test]
    fn missing_params_named() {
        let c = column(&[1.0, 2.0]);
        let p = minmax_fit([(&c, None)], NormMode::PerSpecies).unwrap();
        let other = SpeciesField { species_id: 9, ..c };
        let err = p.apply(&other, None, ValueRange::UNIT).unwrap_err();
        assert_eq!(err.to_string(), "no normalization parameters for group species 9");
    }

    #[test]
    fn apply_to_unit_and_log_ranges() {
        let c = column(&[2.0, 4.0, 6.0]);
        let p = minmax_fit([(&c, None)], NormMode::PerSpecies).unwrap();
        assert_eq!(p.apply(&c, None, ValueRange::UNIT).unwrap().field.values, vec![0.0, 0.5, 1.0]);
        let log_space = p.apply(&c, None, ValueRange::LOG).unwrap().field.values;
        assert_eq!(log_space[0], 1.0);
        assert!((log_space[1] - (1.0 + E) / 2.0).abs() < 1e-15);
        assert!((log_space[2] - E).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_values_are_counted_not_clipped() {
        let train = column(&[2.0, 6.0]);
        let p = minmax_fit([(&train, None)], NormMode::PerSpecies).unwrap();
        let test = column(&[0.0, 4.0, 8.0]);
        let out = p.apply(&test, None, ValueRange::UNIT).unwrap();
        assert_eq!(out.field.values, vec![-0.5, 0.5, 1.5]);
        assert_eq!(out.exceedances, 2);
    }

    #[test]
    fn log_chain_values() {
        let c = column(&[2.0, 4.0, 6.0]);
        let p = minmax_fit([(&c, None)], NormMode::PerSpecies).unwrap();
        let logged = log_chain_apply(&c, None, &p).unwrap().values;
        assert_eq!(logged[0], 0.0);
        assert!((logged[2] - 1.0).abs() < 1e-15);
        // ln((1 + e) / 2), evaluated directly.
        assert!((logged[1] - 0.620_114_5).abs() < 1e-6, "{}", logged[1]);
        let back = log_chain_invert(&column(&logged), None, &p).unwrap();
        for (a, b) in back.values.iter().zip(&c.values) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn log_chain_rejects_non_positive() {
        let train = column(&[2.0, 6.0]);
        let p = minmax_fit([(&train, None)], NormMode::PerSpecies).unwrap();
        let err = log_chain_apply(&column(&[-10.0]), None, &p).unwrap_err();
        assert_eq!(err, XformError::LogDomain { count: 1 });
    }

    #[test]
    fn root_target_examples() {
        let t = root_diff_target(&[0.1, 0.5, 0.0], &[0.108, 0.492, 1.0], RootSpec::CUBE).unwrap();
        assert!((t[0] - 0.2).abs() < 1e-12);
        assert!((t[1] + 0.2).abs() < 1e-12);
        for n in RootSpec::SWEEP {
            let t = root_diff_target(&[0.0], &[1.0], RootSpec::new(n).unwrap()).unwrap();
            assert_eq!(t, vec![1.0]);
        }
        assert!(root_diff_target(&[0.0], &[1.0, 2.0], RootSpec::CUBE).is_err());
    }

    #[test]
    fn root_invert_examples() {
        let inv = root_diff_invert(&[0.3], &[0.0], RootSpec::CUBE).unwrap();
        assert_eq!(inv.output, vec![0.3]);
        let inv = root_diff_invert(&[0.5], &[0.2], RootSpec::CUBE).unwrap();
        assert!((inv.output[0] - 0.508).abs() < 1e-12);
        let inv = root_diff_invert(&[0.0, 0.0], &[1.2, -0.5], RootSpec::CUBE).unwrap();
        assert_eq!(inv.exceedances, 1);
    }

    #[test]
    fn even_roots_rejected() {
        assert_eq!(RootSpec::new(2), Err(XformError::EvenRoot(2)));
        assert!(RootSpec::new(11).is_ok());
    }

    #[test]
    fn affine_examples() {
        assert!(AffineParams::new(0.0, 1.0).is_err());
        let c = column(&[1.0, 2.0]);
        assert_eq!(AffineParams::new(1.0, 0.0).unwrap().apply(&c), c);
        assert_eq!(affine_apply(&c, &AffineParams::new(2.0, 3.0).unwrap()).values, vec![5.0, 7.0]);
    }

    #[test]
    fn sensitivity_ordering_across_sweep() {
        let sweep: Vec<RootSpec> = RootSpec::SWEEP.iter().map(|&n| RootSpec::new(n).unwrap()).collect();
        for d in [1e-4, 0.003, 0.05, 0.4, -0.02] {
            let mags: Vec<f64> = sweep.iter().map(|r| r.root(d).abs()).collect();
            assert!(mags.windows(2).all(|w| w[1] >= w[0]), "d = {d}: {mags:?}");
        }
        let h = 1e-6;
        let slopes: Vec<f64> = sweep.iter().map(|r| (r.root(0.99 + h) - r.root(0.99 - h)) / (2.0 * h)).collect();
        assert!(slopes.windows(2).all(|w| w[1] <= w[0]), "{slopes:?}");
    }

    #[test]
    fn norm_params_serde_roundtrip() {
        let c = SpeciesField::from_fn([2, 2, 3], 2, SpeciesKind::Pm, |i, j, k| 0.1 * (i + 2 * j) as f64 + 1.0 / 3.0 + k as f64);
        let p = minmax_fit([(&c, None)], NormMode::PerSpeciesPerLevel).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("per_species_per_level"));
        let back: NormParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn minmax_roundtrip(values in prop::collection::vec(-1e3f64..1e3, 2..64)) {
            let c = column(&values);
            let p = minmax_fit([(&c, None)], NormMode::PerSpecies).unwrap();
            prop_assume!(!p.get(4, 0, None).unwrap().is_degenerate());
            for range in [ValueRange::UNIT, ValueRange::LOG] {
                let fwd = p.apply(&c, None, range).unwrap();
                prop_assert_eq!(fwd.exceedances, 0);
                let back = p.invert(&fwd.field, None, range).unwrap();
                for (a, b) in back.values.iter().zip(&values) {
                    prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
                }
            }
        }

        #[test]
        fn root_roundtrip(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..64), n_idx in 0usize..6) {
            let n = RootSpec::new(RootSpec::SWEEP[n_idx]).unwrap();
            let (input, output): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let target = root_diff_target(&input, &output, n).unwrap();
            prop_assert!(target.iter().all(|t| t.abs() <= 1.0));
            let back = root_diff_invert(&input, &target, n).unwrap();
            for (a, b) in back.output.iter().zip(&output) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn root_is_odd_and_increasing(a in -1.0f64..1.0, b in -1.0f64..1.0, n_idx in 0usize..6) {
            let r = RootSpec::new(RootSpec::SWEEP[n_idx]).unwrap();
            prop_assert_eq!(r.root(-a), -r.root(a));
            if a < b {
                prop_assert!(r.root(a) < r.root(b));
            }
        }

        // Not true for arbitrary samples ({0.5, 0.9} shrinks), but it is for
        // sign-symmetric ones, where std² = mean d² and |d|^(2/3) ≥ d².
        #[test]
        fn cube_root_spreads_symmetric_residuals(half in prop::collection::vec(-0.999f64..0.999, 1..64)) {
            let d: Vec<f64> = half.iter().flat_map(|&x| [x, -x]).collect();
            prop_assume!(std_dev(&d) > 1e-9);
            let zeros = vec![0.0; d.len()];
            let t = root_diff_target(&zeros, &d, RootSpec::CUBE).unwrap();
            prop_assert!(std_dev(&t) > std_dev(&d));
        }

        #[test]
        fn affine_roundtrip(a in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0], b in -100.0f64..100.0,
                            values in prop::collection::vec(-10.0f64..10.0, 1..32)) {
            let ap = AffineParams::new(a, b).unwrap();
            let c = column(&values);
            let back = ap.invert(&ap.apply(&c));
            for (x, y) in back.values.iter().zip(&values) {
                prop_assert!((x - y).abs() <= 1e-7 * (1.0 + y.abs()));
            }
        }
    }
}
