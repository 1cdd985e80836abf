//! Synthetic wind and species fields: skewness per level and the share of
//! patches that reach the extreme thresholds.

use advect_emu::grid::GridSpec;
use advect_emu::oracle::dataset_wind;
use advect_emu::patch::{classify_extreme, extract_patches, PatchLayout, Thresholds};
use advect_emu::synth::{gen_species_init, sample_skewness, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = GridSpec::stretched(128, 192, 16, 12_000.0, 12_000.0, 40.0, 1.2)?;
    let synth = SynthConfig::default();
    let wind = dataset_wind(&grid, &synth)?;
    println!("max horizontal wind {:.2} m/s", wind.max_horizontal_speed());

    let layout = PatchLayout::default();
    let thresholds = Thresholds::default();
    for field in gen_species_init(&grid, &synth)? {
        let patches = extract_patches(&field, &layout)?;
        let extreme = patches.iter().filter(|p| classify_extreme(&p.field, &thresholds)).count();
        println!(
            "species {} ({:?}): max {:.4} {}, level-0 skewness {:.2}, top-level skewness {:.2}, {extreme}/{} extreme patches",
            field.species_id,
            field.kind,
            field.max_value(),
            field.kind.units(),
            sample_skewness(field.level_values(0)),
            sample_skewness(field.level_values(grid.nz - 1)),
            patches.len()
        );
    }
    Ok(())
}
