//! Reference transport solvers standing in for the production transport
//! module, and the before/after pair generator built on them.
//!
//! `advect_fv` is a donor-cell finite-volume update of the flux form
//! `∂c/∂t + ∇·(vc) = 0`. It is exactly conservative and linear, and
//! preserves constants when the discrete divergence vanishes.
//!
//! `advect_sl` is a semi-Lagrangian step of the advective form
//! `∂c/∂t + v·∇c = 0` with trilinear interpolation, which commutes with any
//! affine map of the concentrations.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{flat_index, GridError, GridSpec, SpeciesField, WindField};
use crate::synth::{gen_species, gen_stream, keyed_rng, wind_from_stream, StreamTag, SynthConfig, SynthError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("CFL number {cfl:.6} exceeds the stability limit of 1 for the upwind scheme")]
    Cfl { cfl: f64 },
    #[error("non-finite values in {what}")]
    NonFinite { what: &'static str },
    #[error("invalid step parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    FvUpwind,
    SemiLagrangian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepParams {
    /// Sub-step length in seconds.
    pub dt: f64,
    pub scheme: Scheme,
    /// Sub-steps composed into one transport timestep.
    pub steps_per_pair: usize,
    /// Half-width of the multiplicative noise applied between transport
    /// timesteps (0.005 means factors in 1 ± 0.5%). Zero disables it.
    pub module_noise: f64,
}

impl Default for StepParams {
    fn default() -> Self {
        // 3 × 600 s = one 30 minute transport call.
        Self { dt: 600.0, scheme: Scheme::FvUpwind, steps_per_pair: 3, module_noise: 0.005 }
    }
}

impl StepParams {
    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(OracleError::InvalidParams(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps_per_pair == 0 {
            return Err(OracleError::InvalidParams("steps_per_pair must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.module_noise) {
            return Err(OracleError::InvalidParams(format!(
                "module_noise must lie in [0, 1), got {}",
                self.module_noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub input: SpeciesField,
    pub output: SpeciesField,
    pub time_index: u32,
    pub species_id: u32,
}

fn check_inputs(c: &SpeciesField, wind: &WindField, grid: &GridSpec) -> Result<(), OracleError> {
    c.check_grid(grid)?;
    wind.check_grid(grid)?;
    if !c.is_finite() {
        return Err(OracleError::NonFinite { what: "concentration" });
    }
    if !wind.is_finite() {
        return Err(OracleError::NonFinite { what: "wind" });
    }
    Ok(())
}

/// Face Courant numbers `u·dt/dx`, `v·dt/dy`, `w·dt/dz[k]`.
fn face_courant(wind: &WindField, grid: &GridSpec, dt: f64) -> [Vec<f64>; 3] {
    let nz = grid.nz;
    let cx = wind.u.iter().map(|u| u * dt / grid.dx).collect();
    let cy = wind.v.iter().map(|v| v * dt / grid.dy).collect();
    let cz = wind.w.iter().enumerate().map(|(idx, w)| w * dt / grid.layer_thickness[idx % nz]).collect();
    [cx, cy, cz]
}

/// Largest total outflow Courant number of any cell. The donor-cell update
/// is positive and stable when this is at most 1; for flow along a single
/// axis it reduces to `max |u|·dt/dx`.
pub fn cfl_number(wind: &WindField, grid: &GridSpec, dt: f64) -> Result<f64, OracleError> {
    wind.check_grid(grid)?;
    let [cx, cy, cz] = face_courant(wind, grid, dt);
    let dims = grid.dims();
    let [nx, ny, nz] = dims;
    let mut worst = 0.0f64;
    for i in 0..nx {
        let im = (i + nx - 1) % nx;
        for j in 0..ny {
            let jm = (j + ny - 1) % ny;
            for k in 0..nz {
                let km = (k + nz - 1) % nz;
                let c = flat_index(dims, i, j, k);
                let out = cx[c].max(0.0)
                    + (-cx[flat_index(dims, im, j, k)]).max(0.0)
                    + cy[c].max(0.0)
                    + (-cy[flat_index(dims, i, jm, k)]).max(0.0)
                    + cz[c].max(0.0)
                    + (-cz[flat_index(dims, i, j, km)]).max(0.0);
                worst = worst.max(out);
            }
        }
    }
    Ok(worst)
}

/// One donor-cell upwind step of length `p.dt`. All face fluxes are taken
/// from the same state (no dimensional splitting), which keeps the update
/// exactly constant-preserving for divergence-free wind.
pub fn advect_fv(c: &SpeciesField, wind: &WindField, grid: &GridSpec, p: &StepParams) -> Result<SpeciesField, OracleError> {
    check_inputs(c, wind, grid)?;
    let cfl = cfl_number(wind, grid, p.dt)?;
    if cfl > 1.0 + 1e-12 {
        return Err(OracleError::Cfl { cfl });
    }
    let dims = grid.dims();
    let [nx, ny, nz] = dims;
    let [cx, cy, cz] = face_courant(wind, grid, p.dt);
    let q = &c.values;

    // Courant-weighted fluxes through the upper face of each cell on each axis.
    let n = q.len();
    let (mut gx, mut gy, mut gz) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..nx {
        let ip = (i + 1) % nx;
        for j in 0..ny {
            let jp = (j + 1) % ny;
            for k in 0..nz {
                let kp = (k + 1) % nz;
                let idx = flat_index(dims, i, j, k);
                gx[idx] = upwind(cx[idx], q[idx], q[flat_index(dims, ip, j, k)]);
                gy[idx] = upwind(cy[idx], q[idx], q[flat_index(dims, i, jp, k)]);
                gz[idx] = upwind(cz[idx], q[idx], q[flat_index(dims, i, j, kp)]);
            }
        }
    }

    let mut out = vec![0.0; n];
    for i in 0..nx {
        let im = (i + nx - 1) % nx;
        for j in 0..ny {
            let jm = (j + ny - 1) % ny;
            for k in 0..nz {
                let km = (k + nz - 1) % nz;
                let idx = flat_index(dims, i, j, k);
                out[idx] = q[idx]
                    - (gx[idx] - gx[flat_index(dims, im, j, k)])
                    - (gy[idx] - gy[flat_index(dims, i, jm, k)])
                    - (gz[idx] - gz[flat_index(dims, i, j, km)]);
            }
        }
    }
    Ok(c.with_values(out))
}

#[inline]
fn upwind(courant: f64, here: f64, next: f64) -> f64 {
    if courant >= 0.0 {
        courant * here
    } else {
        courant * next
    }
}

/// One semi-Lagrangian step: trace each cell centre back by the
/// cell-centred wind times `dt` and interpolate trilinearly, wrapping
/// periodically. There is no CFL restriction.
pub fn advect_sl(c: &SpeciesField, wind: &WindField, grid: &GridSpec, p: &StepParams) -> Result<SpeciesField, OracleError> {
    check_inputs(c, wind, grid)?;
    let dims = grid.dims();
    let [nx, ny, nz] = dims;
    let mut out = vec![0.0; c.values.len()];
    for i in 0..nx {
        let im = (i + nx - 1) % nx;
        for j in 0..ny {
            let jm = (j + ny - 1) % ny;
            for k in 0..nz {
                let km = (k + nz - 1) % nz;
                let idx = flat_index(dims, i, j, k);
                let u = 0.5 * (wind.u[idx] + wind.u[flat_index(dims, im, j, k)]);
                let v = 0.5 * (wind.v[idx] + wind.v[flat_index(dims, i, jm, k)]);
                let w = 0.5 * (wind.w[idx] + wind.w[flat_index(dims, i, j, km)]);
                let x = i as f64 - u * p.dt / grid.dx;
                let y = j as f64 - v * p.dt / grid.dy;
                let z = k as f64 - w * p.dt / grid.layer_thickness[k];
                out[idx] = trilinear(c, x, y, z);
            }
        }
    }
    Ok(c.with_values(out))
}

fn wrap_split(pos: f64, n: usize) -> (usize, usize, f64) {
    let base = pos.floor();
    let frac = pos - base;
    let lo = (base as i64).rem_euclid(n as i64) as usize;
    (lo, (lo + 1) % n, frac)
}

fn trilinear(c: &SpeciesField, x: f64, y: f64, z: f64) -> f64 {
    let [nx, ny, nz] = c.dims;
    let (i0, i1, fx) = wrap_split(x, nx);
    let (j0, j1, fy) = wrap_split(y, ny);
    let (k0, k1, fz) = wrap_split(z, nz);
    let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    let plane = |k: usize| {
        let lo = lerp(c.get(i0, j0, k), c.get(i1, j0, k), fx);
        let hi = lerp(c.get(i0, j1, k), c.get(i1, j1, k), fx);
        lerp(lo, hi, fy)
    };
    lerp(plane(k0), plane(k1), fz)
}

/// One transport timestep: `p.steps_per_pair` sub-steps of the configured
/// scheme.
pub fn transport(c: &SpeciesField, wind: &WindField, grid: &GridSpec, p: &StepParams) -> Result<SpeciesField, OracleError> {
    p.validate()?;
    let step = match p.scheme {
        Scheme::FvUpwind => advect_fv,
        Scheme::SemiLagrangian => advect_sl,
    };
    let mut state = step(c, wind, grid, p)?;
    for _ in 1..p.steps_per_pair {
        state = step(&state, wind, grid, p)?;
    }
    Ok(state)
}

/// The steady wind used for a whole synthetic dataset.
pub fn dataset_wind(grid: &GridSpec, synth: &SynthConfig) -> Result<WindField, OracleError> {
    let stream = gen_stream(grid, synth)?;
    Ok(wind_from_stream(&stream, grid)?)
}

/// Pairs for one species over `n_timesteps` transport timesteps. Between
/// timesteps the state is multiplied cell-wise by `1 ± module_noise`, a
/// stand-in for the chemistry and physics modules that run between
/// transport calls.
pub fn gen_species_pairs(
    grid: &GridSpec,
    synth: &SynthConfig,
    p: &StepParams,
    n_timesteps: usize,
    species: u32,
    wind: &WindField,
) -> Result<Vec<PairRecord>, OracleError> {
    p.validate()?;
    if n_timesteps < 2 {
        return Err(OracleError::InvalidParams(format!("n_timesteps must be at least 2, got {n_timesteps}")));
    }
    let mut noise = keyed_rng(synth.seed, species, StreamTag::ModuleNoise);
    let mut state = gen_species(grid, synth, species)?;
    let mut pairs = Vec::with_capacity(n_timesteps);
    for t in 0..n_timesteps {
        let output = transport(&state, wind, grid, p)?;
        let next = if p.module_noise > 0.0 && t + 1 < n_timesteps {
            output.map(|v| v * (1.0 + p.module_noise * noise.random_range(-1.0..=1.0)))
        } else {
            output.clone()
        };
        pairs.push(PairRecord { input: state, output, time_index: t as u32, species_id: species });
        state = next;
    }
    Ok(pairs)
}

/// All pairs, ordered by species then time. Species run in parallel; the
/// result does not depend on the schedule.
pub fn gen_dataset(
    grid: &GridSpec,
    synth: &SynthConfig,
    p: &StepParams,
    n_timesteps: usize,
) -> Result<Vec<PairRecord>, OracleError> {
    let wind = dataset_wind(grid, synth)?;
    let per_species: Result<Vec<_>, _> = (0..synth.n_species as u32)
        .into_par_iter()
        .map(|s| gen_species_pairs(grid, synth, p, n_timesteps, s, &wind))
        .collect();
    Ok(per_species?.into_iter().flatten().collect())
}
