//! Grid geometry, staggered wind storage, discrete divergence and mass
//! accounting.
//!
//! Arrays are stored flat in C order over `[nx, ny, nz]`, so the vertical
//! index varies fastest. Wind components live on cell faces (Arakawa C-grid):
//! `u[i, j, k]` is the velocity through the face between cells `i` and `i + 1`
//! along x, and likewise for `v` along y and `w` along z. All axes are
//! periodic.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        };
        f.write_str(name)
    }
}

pub const AXES: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid axis {axis} must have at least one cell")]
    EmptyAxis { axis: Axis },
    #[error("{name} must be strictly positive and finite, got {value}")]
    BadSpacing { name: String, value: f64 },
    #[error("layer_thickness has {got} entries but nz = {nz}")]
    ThicknessLength { got: usize, nz: usize },
    #[error("shape mismatch on axis {axis}: expected {expected}, got {got}")]
    ShapeMismatch { axis: Axis, expected: usize, got: usize },
    #[error("array holds {got} values but shape {dims:?} needs {expected}")]
    LengthMismatch { dims: [usize; 3], expected: usize, got: usize },
}

/// Compare two shapes axis by axis, reporting the first axis that differs.
pub fn check_dims(expected: [usize; 3], got: [usize; 3]) -> Result<(), GridError> {
    for (axis, (&e, &g)) in AXES.iter().zip(expected.iter().zip(got.iter())) {
        if e != g {
            return Err(GridError::ShapeMismatch { axis: *axis, expected: e, got: g });
        }
    }
    Ok(())
}

#[inline]
pub fn flat_index(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Horizontal spacing in meters.
    pub dx: f64,
    pub dy: f64,
    /// Thickness of each vertical layer in meters, bottom first. Not uniform
    /// in general.
    pub layer_thickness: Vec<f64>,
}

impl GridSpec {
    pub fn new(
        nx: usize,
        ny: usize,
        nz: usize,
        dx: f64,
        dy: f64,
        layer_thickness: Vec<f64>,
    ) -> Result<Self, GridError> {
        let grid = Self { nx, ny, nz, dx, dy, layer_thickness };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for (axis, n) in AXES.iter().zip(self.dims()) {
            if n == 0 {
                return Err(GridError::EmptyAxis { axis: *axis });
            }
        }
        for (name, value) in [("dx", self.dx), ("dy", self.dy)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(GridError::BadSpacing { name: name.to_string(), value });
            }
        }
        if self.layer_thickness.len() != self.nz {
            return Err(GridError::ThicknessLength { got: self.layer_thickness.len(), nz: self.nz });
        }
        for (k, &t) in self.layer_thickness.iter().enumerate() {
            if !(t.is_finite() && t > 0.0) {
                return Err(GridError::BadSpacing { name: format!("layer_thickness[{k}]"), value: t });
            }
        }
        Ok(())
    }

    /// Layer thicknesses growing geometrically from `bottom` by `growth` per
    /// level.
    pub fn stretched(
        nx: usize,
        ny: usize,
        nz: usize,
        dx: f64,
        dy: f64,
        bottom: f64,
        growth: f64,
    ) -> Result<Self, GridError> {
        let thickness = (0..nz).map(|k| bottom * growth.powi(k as i32)).collect();
        Self::new(nx, ny, nz, dx, dy, thickness)
    }

    /// Unit spacing in every direction.
    pub fn unit(nx: usize, ny: usize, nz: usize) -> Result<Self, GridError> {
        Self::new(nx, ny, nz, 1.0, 1.0, vec![1.0; nz])
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Geometry of a sub-block of `px × py` columns holding the lowest `pz`
    /// levels. Used to weigh patch masses.
    pub fn patch_grid(&self, px: usize, py: usize, pz: usize) -> Result<Self, GridError> {
        if pz > self.nz {
            return Err(GridError::ShapeMismatch { axis: Axis::Z, expected: self.nz, got: pz });
        }
        Self::new(px, py, pz, self.dx, self.dy, self.layer_thickness[..pz].to_vec())
    }
}

/// Tag for the unit system of a species. Ozone-like species are in ppm and
/// particulate constituents in µg/m³.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpeciesKind {
    #[serde(rename = "ozone_kind")]
    Ozone,
    #[serde(rename = "pm_kind")]
    Pm,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown species kind code {0}")]
pub struct UnknownKind(pub u8);

impl SpeciesKind {
    pub fn code(self) -> u8 {
        match self {
            SpeciesKind::Ozone => 0,
            SpeciesKind::Pm => 1,
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            SpeciesKind::Ozone => "ppm",
            SpeciesKind::Pm => "ug/m3",
        }
    }
}

impl TryFrom<u8> for SpeciesKind {
    type Error = UnknownKind;

    fn try_from(code: u8) -> Result<Self, Self::Error> {
        match code {
            0 => Ok(SpeciesKind::Ozone),
            1 => Ok(SpeciesKind::Pm),
            other => Err(UnknownKind(other)),
        }
    }
}

/// Concentration of one species on a 3D block of cells.
///
/// The oracle solvers run at double precision so that conservation can be
/// checked to 1e-10; network tensors are single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesField {
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    pub species_id: u32,
    pub kind: SpeciesKind,
}

impl SpeciesField {
    pub fn new(
        dims: [usize; 3],
        values: Vec<f64>,
        species_id: u32,
        kind: SpeciesKind,
    ) -> Result<Self, GridError> {
        let expected = dims.iter().product();
        if values.len() != expected {
            return Err(GridError::LengthMismatch { dims, expected, got: values.len() });
        }
        Ok(Self { dims, values, species_id, kind })
    }

    pub fn filled(dims: [usize; 3], value: f64, species_id: u32, kind: SpeciesKind) -> Self {
        Self { dims, values: vec![value; dims.iter().product()], species_id, kind }
    }

    pub fn from_fn(
        dims: [usize; 3],
        species_id: u32,
        kind: SpeciesKind,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    values.push(f(i, j, k));
                }
            }
        }
        Self { dims, values, species_id, kind }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[flat_index(self.dims, i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = flat_index(self.dims, i, j, k);
        self.values[idx] = value;
    }

    /// A copy with the same identity and new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self { dims: self.dims, values, species_id: self.species_id, kind: self.kind }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<(), GridError> {
        check_dims(grid.dims(), self.dims)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Values of level `k`, in `(i, j)` order.
    pub fn level_values(&self, k: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        let nz = self.dims[2];
        self.values.iter().skip(k).step_by(nz).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Face-centred velocity components in m/s (see module docs for staggering).
#[derive(Debug, Clone, PartialEq)]
pub struct WindField {
    pub dims: [usize; 3],
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

impl WindField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Self { dims, u: vec![0.0; n], v: vec![0.0; n], w: vec![0.0; n] }
    }

    pub fn uniform(dims: [usize; 3], u: f64, v: f64, w: f64) -> Self {
        let n = dims.iter().product();
        Self { dims, u: vec![u; n], v: vec![v; n], w: vec![w; n] }
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<(), GridError> {
        check_dims(grid.dims(), self.dims)?;
        let n = grid.cell_count();
        for comp in [&self.u, &self.v, &self.w] {
            if comp.len() != n {
                return Err(GridError::LengthMismatch { dims: self.dims, expected: n, got: comp.len() });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).chain(&self.w).all(|x| x.is_finite())
    }

    /// Largest co-indexed horizontal speed `sqrt(u² + v²)`, which bounds every
    /// face component.
    pub fn max_horizontal_speed(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| u.hypot(*v))
            .fold(0.0, f64::max)
    }
}

pub fn cell_volumes(grid: &GridSpec) -> Vec<f64> {
    let area = grid.dx * grid.dy;
    let mut out = Vec::with_capacity(grid.cell_count());
    for _ in 0..grid.nx * grid.ny {
        out.extend(grid.layer_thickness.iter().map(|t| area * t));
    }
    out
}

/// Periodic flux divergence on the C-grid:
/// `(u[i] - u[i-1]) / dx + (v[j] - v[j-1]) / dy + (w[k] - w[k-1]) / dz[k]`.
///
/// This is the stencil whose vanishing makes the finite-volume update
/// preserve constants.
pub fn discrete_divergence(wind: &WindField, grid: &GridSpec) -> Result<Vec<f64>, GridError> {
    wind.check_grid(grid)?;
    let dims = grid.dims();
    let [nx, ny, nz] = dims;
    let mut div = vec![0.0; grid.cell_count()];
    for i in 0..nx {
        let im = (i + nx - 1) % nx;
        for j in 0..ny {
            let jm = (j + ny - 1) % ny;
            for k in 0..nz {
                let km = (k + nz - 1) % nz;
                let c = flat_index(dims, i, j, k);
                let du = wind.u[c] - wind.u[flat_index(dims, im, j, k)];
                let dv = wind.v[c] - wind.v[flat_index(dims, i, jm, k)];
                let dw = wind.w[c] - wind.w[flat_index(dims, i, j, km)];
                div[c] = du / grid.dx + dv / grid.dy + dw / grid.layer_thickness[k];
            }
        }
    }
    Ok(div)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Total mass `Σ c · volume` in species units × m³.
pub fn total_mass(c: &SpeciesField, grid: &GridSpec) -> Result<f64, GridError> {
    c.check_grid(grid)?;
    let area = grid.dx * grid.dy;
    let mut total = CompensatedSum::default();
    for (k, thickness) in grid.layer_thickness.iter().enumerate() {
        let mut level = CompensatedSum::default();
        for v in c.level_values(k) {
            level.add(v);
        }
        total.add(level.value() * area * thickness);
    }
    Ok(total.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(dims: [usize; 3], values: Vec<f64>) -> SpeciesField {
        SpeciesField::new(dims, values, 0, SpeciesKind::Ozone).unwrap()
    }

    #[test]
    fn unit_grid_volumes_are_one() {
        let g = GridSpec::new(3, 2, 2, 1.0, 1.0, vec![1.0, 1.0]).unwrap();
        assert!(cell_volumes(&g).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn volume_arithmetic() {
        let g = GridSpec::new(2, 2, 1, 2.0, 3.0, vec![5.0]).unwrap();
        assert!(cell_volumes(&g).iter().all(|&v| v == 30.0));

        let g = GridSpec::new(2, 3, 2, 1000.0, 1000.0, vec![50.0, 100.0]).unwrap();
        let vols = cell_volumes(&g);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(vols[flat_index(g.dims(), i, j, 0)], 5e7);
                assert_eq!(vols[flat_index(g.dims(), i, j, 1)], 1e8);
            }
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(GridSpec::unit(0, 1, 1), Err(GridError::EmptyAxis { axis: Axis::X })));
        assert!(matches!(
            GridSpec::new(1, 1, 2, 1.0, 1.0, vec![1.0]),
            Err(GridError::ThicknessLength { got: 1, nz: 2 })
        ));
        assert!(GridSpec::new(1, 1, 1, -1.0, 1.0, vec![1.0]).is_err());
        assert!(GridSpec::new(1, 1, 2, 1.0, 1.0, vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn divergence_of_trivial_winds_vanishes() {
        let g = GridSpec::unit(4, 5, 3).unwrap();
        let zero = discrete_divergence(&WindField::zeros(g.dims()), &g).unwrap();
        assert!(zero.iter().all(|&d| d == 0.0));
        let uniform = discrete_divergence(&WindField::uniform(g.dims(), 1.0, 0.0, 0.0), &g).unwrap();
        assert!(uniform.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn divergence_shape_mismatch_names_axis() {
        let g = GridSpec::unit(4, 5, 3).unwrap();
        let wind = WindField::zeros([4, 6, 3]);
        let err = discrete_divergence(&wind, &g).unwrap_err();
        assert_eq!(err, GridError::ShapeMismatch { axis: Axis::Y, expected: 5, got: 6 });
    }

    #[test]
    fn divergence_detects_sources() {
        // u increases across one face: a net outflow from cell 1.
        let g = GridSpec::unit(3, 1, 1).unwrap();
        let mut wind = WindField::zeros(g.dims());
        wind.u[1] = 2.0;
        let div = discrete_divergence(&wind, &g).unwrap();
        assert_eq!(div, vec![0.0, 2.0, -2.0]);
    }

    #[test]
    fn mass_of_simple_fields() {
        let g = GridSpec::unit(2, 2, 2).unwrap();
        assert_eq!(total_mass(&field(g.dims(), vec![0.0; 8]), &g).unwrap(), 0.0);
        assert_eq!(total_mass(&field(g.dims(), vec![1.0; 8]), &g).unwrap(), 8.0);
    }

    #[test]
    fn mass_matches_per_cell_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = GridSpec::new(9, 7, 5, 1500.0, 1200.0, vec![20.0, 35.0, 60.0, 110.0, 200.0]).unwrap();
        let values: Vec<f64> = (0..g.cell_count()).map(|_| rng.random::<f64>() * 40.0).collect();
        let c = field(g.dims(), values.clone());
        // Brute force in cell order, multiplying before summing.
        let vols = cell_volumes(&g);
        let brute: f64 = values.iter().zip(&vols).map(|(c, v)| c * v).sum();
        let mass = total_mass(&c, &g).unwrap();
        assert!(((mass - brute) / brute).abs() < 1e-12, "{mass} vs {brute}");
    }

    #[test]
    fn mass_shape_mismatch() {
        let g = GridSpec::unit(2, 2, 2).unwrap();
        let c = field([2, 2, 1], vec![1.0; 4]);
        assert!(matches!(total_mass(&c, &g), Err(GridError::ShapeMismatch { axis: Axis::Z, .. })));
    }

    #[test]
    fn kind_codes_roundtrip() {
        for kind in [SpeciesKind::Ozone, SpeciesKind::Pm] {
            assert_eq!(SpeciesKind::try_from(kind.code()).unwrap(), kind);
        }
        assert_eq!(SpeciesKind::try_from(9), Err(UnknownKind(9)));
    }
}
