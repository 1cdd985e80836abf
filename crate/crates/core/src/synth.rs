//! Synthetic meteorology and initial concentrations.
//!
//! Winds come from a per-level stream function, so they are discretely
//! divergence-free on the C-grid. Concentrations are a smooth log-normal
//! background plus localized Gaussian plumes, decaying with height.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, species, purpose)`, so results do not depend on generation order
//! or thread count.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{check_dims, flat_index, GridError, GridSpec, SpeciesField, SpeciesKind, WindField};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("degenerate stream: n_modes must be at least 1")]
    DegenerateStream,
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Purpose tags separating the random streams of one species.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum StreamTag {
    Wind = 1,
    Background = 2,
    Plumes = 3,
    ModuleNoise = 4,
    Split = 5,
}

/// Independent random stream for `(seed, species, tag)`.
pub fn keyed_rng(seed: u64, species: u32, tag: StreamTag) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((species as u64) << 8) | tag as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_species: usize,
    /// Fourier modes in each stream function.
    pub n_modes: usize,
    /// Natural stream function amplitude in m²/s before the speed cap.
    pub stream_amplitude: f64,
    /// Cap on horizontal wind speed, m/s.
    pub max_speed: f64,
    pub plume_count: usize,
    /// Plume peak relative to the species background level.
    pub plume_amplitude: f64,
    /// Standard deviation of the log of the background.
    pub background_sigma: f64,
    /// Concentration factor per level upward, in (0, 1].
    pub vertical_decay: f64,
    pub ozone_background_ppm: f64,
    pub pm_background_ugm3: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 20200901,
            n_species: 8,
            n_modes: 6,
            stream_amplitude: 2.0e7,
            max_speed: 10.0,
            plume_count: 8,
            plume_amplitude: 2.5,
            background_sigma: 0.6,
            vertical_decay: 0.85,
            ozone_background_ppm: 0.025,
            pm_background_ugm3: 5.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.n_modes == 0 {
            return Err(SynthError::DegenerateStream);
        }
        if !(self.max_speed > 0.0 && self.max_speed.is_finite()) {
            return bad(format!("max_speed must be positive, got {}", self.max_speed));
        }
        if !(self.vertical_decay > 0.0 && self.vertical_decay <= 1.0) {
            return bad(format!("vertical_decay must lie in (0, 1], got {}", self.vertical_decay));
        }
        for (name, v) in [
            ("stream_amplitude", self.stream_amplitude),
            ("plume_amplitude", self.plume_amplitude),
            ("background_sigma", self.background_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("ozone_background_ppm", self.ozone_background_ppm), ("pm_background_ugm3", self.pm_background_ugm3)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn kind_of(&self, species: u32) -> SpeciesKind {
        if species % 2 == 0 {
            SpeciesKind::Ozone
        } else {
            SpeciesKind::Pm
        }
    }

    fn background_level(&self, kind: SpeciesKind) -> f64 {
        match kind {
            SpeciesKind::Ozone => self.ozone_background_ppm,
            SpeciesKind::Pm => self.pm_background_ugm3,
        }
    }
}

/// Stream function values at cell corners `(i + ½, j + ½)`, one 2D function
/// per level, stored `[nx, ny, nz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamField {
    pub dims: [usize; 3],
    pub psi: Vec<f64>,
}

struct Mode {
    kx: f64,
    ky: f64,
    amplitude: f64,
    phase: f64,
}

fn draw_modes(rng: &mut ChaCha8Rng, n: usize, max_wavenumber: i32, amplitude: f64) -> Vec<Mode> {
    (0..n)
        .map(|_| {
            let (kx, ky) = loop {
                let kx = rng.random_range(-max_wavenumber..=max_wavenumber);
                let ky = rng.random_range(-max_wavenumber..=max_wavenumber);
                if kx != 0 || ky != 0 {
                    break (kx as f64, ky as f64);
                }
            };
            let z: f64 = StandardNormal.sample(rng);
            Mode {
                kx,
                ky,
                amplitude: amplitude * z / kx.hypot(ky),
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect()
}

fn eval_modes(modes: &[Mode], x: f64, y: f64) -> f64 {
    modes
        .iter()
        .map(|m| m.amplitude * (2.0 * PI * (m.kx * x + m.ky * y) + m.phase).cos())
        .sum()
}

fn vertical_blend(k: usize, nz: usize) -> f64 {
    if nz > 1 {
        k as f64 / (nz - 1) as f64
    } else {
        0.0
    }
}

/// Random low-order Fourier stream function, blended linearly between a
/// bottom and a top mode set so it is smooth in the vertical, then scaled so
/// the derived wind respects `max_speed`.
pub fn gen_stream(grid: &GridSpec, cfg: &SynthConfig) -> Result<StreamField, SynthError> {
    cfg.validate()?;
    grid.validate()?;
    let mut rng = keyed_rng(cfg.seed, u32::MAX, StreamTag::Wind);
    let bottom = draw_modes(&mut rng, cfg.n_modes, 3, cfg.stream_amplitude);
    let top = draw_modes(&mut rng, cfg.n_modes, 3, cfg.stream_amplitude);
    let dims = grid.dims();
    let mut psi = vec![0.0; grid.cell_count()];
    for i in 0..grid.nx {
        let x = (i as f64 + 0.5) / grid.nx as f64;
        for j in 0..grid.ny {
            let y = (j as f64 + 0.5) / grid.ny as f64;
            let (pb, pt) = (eval_modes(&bottom, x, y), eval_modes(&top, x, y));
            for k in 0..grid.nz {
                let s = vertical_blend(k, grid.nz);
                psi[flat_index(dims, i, j, k)] = (1.0 - s) * pb + s * pt;
            }
        }
    }
    let mut stream = StreamField { dims, psi };
    let speed = wind_from_stream(&stream, grid)?.max_horizontal_speed();
    if speed > cfg.max_speed {
        let scale = cfg.max_speed / speed * (1.0 - 1e-12);
        stream.psi.iter_mut().for_each(|p| *p *= scale);
    }
    Ok(stream)
}

/// `u = δψ/δy`, `v = -δψ/δx` on the C-grid, `w = 0`. The differences are the
/// adjoint of the divergence stencil, so the result is divergence-free up to
/// rounding.
pub fn wind_from_stream(stream: &StreamField, grid: &GridSpec) -> Result<WindField, GridError> {
    check_dims(grid.dims(), stream.dims)?;
    let dims = grid.dims();
    let [nx, ny, nz] = dims;
    let mut wind = WindField::zeros(dims);
    let psi = &stream.psi;
    for i in 0..nx {
        let im = (i + nx - 1) % nx;
        for j in 0..ny {
            let jm = (j + ny - 1) % ny;
            for k in 0..nz {
                let c = flat_index(dims, i, j, k);
                wind.u[c] = (psi[c] - psi[flat_index(dims, i, jm, k)]) / grid.dy;
                wind.v[c] = -(psi[c] - psi[flat_index(dims, im, j, k)]) / grid.dx;
            }
        }
    }
    Ok(wind)
}

/// Zero-mean, unit-variance smooth periodic 2D field.
fn smooth_field(rng: &mut ChaCha8Rng, nx: usize, ny: usize, n_modes: usize) -> Vec<f64> {
    let modes = draw_modes(rng, n_modes, 6, 1.0);
    let mut out = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            out.push(eval_modes(&modes, i as f64 / nx as f64, j as f64 / ny as f64));
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let std = if std > 0.0 { std } else { 1.0 };
    out.iter_mut().for_each(|v| *v = (*v - mean) / std);
    out
}

fn periodic_delta(a: f64, b: f64, n: usize) -> f64 {
    let n = n as f64;
    let d = (a - b).rem_euclid(n);
    d.min(n - d)
}

/// Initial condition for one species.
pub fn gen_species(grid: &GridSpec, cfg: &SynthConfig, species: u32) -> Result<SpeciesField, SynthError> {
    cfg.validate()?;
    grid.validate()?;
    let kind = cfg.kind_of(species);
    let base = cfg.background_level(kind);
    let (nx, ny, nz) = (grid.nx, grid.ny, grid.nz);

    let mut rng = keyed_rng(cfg.seed, species, StreamTag::Background);
    let g_bottom = smooth_field(&mut rng, nx, ny, 12);
    let g_top = smooth_field(&mut rng, nx, ny, 12);

    let mut rng = keyed_rng(cfg.seed, species, StreamTag::Plumes);
    let mut plumes = vec![0.0; nx * ny];
    for _ in 0..cfg.plume_count {
        let cx = rng.random_range(0.0..nx as f64);
        let cy = rng.random_range(0.0..ny as f64);
        let radius = rng.random_range(2.0..6.0);
        let amp = cfg.plume_amplitude * base * rng.random_range(0.5..1.5);
        for i in 0..nx {
            let dx = periodic_delta(i as f64, cx, nx);
            for j in 0..ny {
                let dy = periodic_delta(j as f64, cy, ny);
                let r2 = dx * dx + dy * dy;
                plumes[i * ny + j] += amp * (-r2 / (2.0 * radius * radius)).exp();
            }
        }
    }

    let sigma = cfg.background_sigma;
    let field = SpeciesField::from_fn(grid.dims(), species, kind, |i, j, k| {
        let s = vertical_blend(k, nz);
        let g = ((1.0 - s) * g_bottom[i * ny + j] + s * g_top[i * ny + j]) / ((1.0 - s).powi(2) + s * s).sqrt();
        let background = base * (sigma * g - 0.5 * sigma * sigma).exp();
        (background + plumes[i * ny + j]) * cfg.vertical_decay.powi(k as i32)
    });
    Ok(field)
}

/// Initial conditions for all species; kinds alternate ozone, pm, ozone, …
pub fn gen_species_init(grid: &GridSpec, cfg: &SynthConfig) -> Result<Vec<SpeciesField>, SynthError> {
    (0..cfg.n_species as u32)
        .into_par_iter()
        .map(|s| gen_species(grid, cfg, s))
        .collect()
}

/// Moment-based sample skewness.
pub fn sample_skewness(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let (mut n, mut sum) = (0.0, 0.0);
    for v in values.clone() {
        n += 1.0;
        sum += v;
    }
    let mean = sum / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    let (m2, m3) = (m2 / n, m3 / n);
    if m2 == 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}
