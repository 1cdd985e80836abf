//! Normalization and the root-difference target on one transport pair,
//! including the spread of the target for each root order.

use advect_emu::grid::GridSpec;
use advect_emu::oracle::{dataset_wind, gen_species_pairs, StepParams};
use advect_emu::synth::SynthConfig;
use advect_emu::xform::{root_diff_invert, root_diff_target, std_dev, NormFitter, NormMode, RootSpec, ValueRange};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = GridSpec::stretched(64, 96, 16, 12_000.0, 12_000.0, 40.0, 1.2)?;
    let synth = SynthConfig::default();
    let wind = dataset_wind(&grid, &synth)?;
    let pairs = gen_species_pairs(&grid, &synth, &StepParams::default(), 2, 0, &wind)?;
    let pair = &pairs[0];

    let mut fitter = NormFitter::new(NormMode::PerSpeciesPerLevel);
    fitter.observe(&pair.input, None)?;
    fitter.observe(&pair.output, None)?;
    let params = fitter.finish()?;
    let x = params.apply(&pair.input, None, ValueRange::UNIT)?.field;
    let y = params.apply(&pair.output, None, ValueRange::UNIT)?.field;
    let back = params.invert(&x, None, ValueRange::UNIT)?;
    let err = back.values.iter().zip(&pair.input.values).map(|(a, b)| (a - b).abs() / b.abs().max(1e-30)).fold(0.0, f64::max);
    println!("{} normalization groups, round-trip relative error {err:.1e}", params.groups.len());

    let diff: Vec<f64> = y.values.iter().zip(&x.values).map(|(b, a)| b - a).collect();
    println!("difference std {:.3e}", std_dev(&diff));
    for n in RootSpec::SWEEP {
        let r = RootSpec::new(n)?;
        let t = root_diff_target(&x.values, &y.values, r)?;
        let rebuilt = root_diff_invert(&x.values, &t, r)?;
        let err = rebuilt.output.iter().zip(&y.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("n = {n:>2}: target std {:.3e}, reconstruction error {err:.1e}", std_dev(&t));
    }
    Ok(())
}
