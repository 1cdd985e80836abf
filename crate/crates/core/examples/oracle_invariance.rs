//! Scale, affine and mass checks for the two transport schemes on a
//! synthetic non-divergent wind.

use advect_emu::grid::{discrete_divergence, total_mass, GridSpec};
use advect_emu::oracle::{advect_fv, advect_sl, cfl_number, dataset_wind, Scheme, StepParams};
use advect_emu::synth::{gen_species, SynthConfig};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((*x as f32) - (*y as f32)).abs() as f64).fold(0.0, f64::max)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = GridSpec::stretched(64, 96, 8, 12_000.0, 12_000.0, 40.0, 1.2)?;
    let synth = SynthConfig::default();
    let wind = dataset_wind(&grid, &synth)?;
    let c = gen_species(&grid, &synth, 0)?;
    let fv = StepParams { module_noise: 0.0, ..StepParams::default() };
    let sl = StepParams { scheme: Scheme::SemiLagrangian, ..fv.clone() };

    let div = discrete_divergence(&wind, &grid)?.into_iter().map(f64::abs).fold(0.0, f64::max);
    println!("max |divergence| {div:.2e}, CFL {:.3}", cfl_number(&wind, &grid, fv.dt)?);

    let base = advect_fv(&c, &wind, &grid, &fv)?;
    for a in [0.1, 7.0, 1000.0] {
        let scaled = advect_fv(&c.map(|v| a * v), &wind, &grid, &fv)?;
        let expect: Vec<f64> = base.values.iter().map(|v| a * v).collect();
        println!("fv scale a = {a:>6}: max |difference| at f32 = {:.2e}", max_diff(&scaled.values, &expect) / a.max(1.0));
    }

    let base = advect_sl(&c, &wind, &grid, &sl)?;
    for (a, b) in [(2.0, 0.3), (0.01, 5.0)] {
        let moved = advect_sl(&c.map(|v| a * v + b), &wind, &grid, &sl)?;
        let expect: Vec<f64> = base.values.iter().map(|v| a * v + b).collect();
        println!("sl affine ({a}, {b}): max |difference| at f32 = {:.2e}", max_diff(&moved.values, &expect));
    }

    let m0 = total_mass(&c, &grid)?;
    let mut state = c.clone();
    for _ in 0..100 {
        state = advect_fv(&state, &wind, &grid, &StepParams { steps_per_pair: 1, ..fv.clone() })?;
    }
    println!("relative mass drift after 100 fv steps: {:.2e}", (total_mass(&state, &grid)? - m0).abs() / m0);
    Ok(())
}
