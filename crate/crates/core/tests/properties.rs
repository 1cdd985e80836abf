use proptest::prelude::*;

use advect_emu::grid::{total_mass, GridSpec, SpeciesField, SpeciesKind};
use advect_emu::oracle::{advect_fv, advect_sl, dataset_wind, Scheme, StepParams};
use advect_emu::patch::{assemble_patches, extract_patches, split_dataset, PatchLayout, SampleKey, SplitPolicy};
use advect_emu::synth::SynthConfig;

fn small_grid() -> GridSpec {
    GridSpec::stretched(12, 18, 4, 12_000.0, 12_000.0, 40.0, 1.2).unwrap()
}

fn field_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..10.0, n)
}

fn quiet() -> StepParams {
    StepParams { module_noise: 0.0, steps_per_pair: 1, ..StepParams::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fv_is_linear_and_conservative(values in field_strategy(12 * 18 * 4), a in 0.01f64..100.0, seed in 0u64..50) {
        let grid = small_grid();
        let wind = dataset_wind(&grid, &SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let c = SpeciesField::new(grid.dims(), values, 0, SpeciesKind::Ozone).unwrap();
        let p = quiet();
        let out = advect_fv(&c, &wind, &grid, &p).unwrap();
        let scaled = advect_fv(&c.map(|v| a * v), &wind, &grid, &p).unwrap();
        for (s, o) in scaled.values.iter().zip(&out.values) {
            prop_assert!((s - a * o).abs() <= 1e-12 * (a * o).abs().max(1.0));
        }
        let (m0, m1) = (total_mass(&c, &grid).unwrap(), total_mass(&out, &grid).unwrap());
        prop_assert!((m1 - m0).abs() <= 1e-10 * m0.abs().max(1e-300));
        prop_assert!(out.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fv_keeps_constants(level in 0.0f64..1000.0, seed in 0u64..50) {
        let grid = small_grid();
        let wind = dataset_wind(&grid, &SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let c = SpeciesField::filled(grid.dims(), level, 0, SpeciesKind::Pm);
        let out = advect_fv(&c, &wind, &grid, &quiet()).unwrap();
        prop_assert!(out.values.iter().all(|v| (v - level).abs() <= 1e-10 * level.max(1.0)));
    }

    #[test]
    fn sl_is_affine(values in field_strategy(12 * 18 * 4), a in 0.01f64..10.0, b in -5.0f64..5.0, seed in 0u64..50) {
        let grid = small_grid();
        let wind = dataset_wind(&grid, &SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let c = SpeciesField::new(grid.dims(), values, 0, SpeciesKind::Ozone).unwrap();
        let p = StepParams { scheme: Scheme::SemiLagrangian, ..quiet() };
        let out = advect_sl(&c, &wind, &grid, &p).unwrap();
        let moved = advect_sl(&c.map(|v| a * v + b), &wind, &grid, &p).unwrap();
        for (m, o) in moved.values.iter().zip(&out.values) {
            prop_assert!((m - (a * o + b)).abs() <= 1e-10 * (a * o + b).abs().max(1.0));
        }
    }

    #[test]
    fn sl_stays_within_input_range(values in field_strategy(12 * 18 * 4), seed in 0u64..50) {
        let grid = small_grid();
        let wind = dataset_wind(&grid, &SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let c = SpeciesField::new(grid.dims(), values, 0, SpeciesKind::Ozone).unwrap();
        let p = StepParams { scheme: Scheme::SemiLagrangian, ..quiet() };
        let out = advect_sl(&c, &wind, &grid, &p).unwrap();
        let (lo, hi) = c.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(out.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn patches_tile_the_field(rows in 1usize..5, cols in 1usize..5, depth in prop::sample::select(vec![1usize, 2, 4]), seed in 0u64..1000) {
        let dims = [rows * 3, cols * 2, 4];
        let layout = PatchLayout { rows, cols, depth };
        let f = SpeciesField::from_fn(dims, 0, SpeciesKind::Ozone, |i, j, k| ((i * 31 + j * 7 + k) as u64 ^ seed) as f64);
        if depth == 4 {
            let patches = extract_patches(&f, &layout).unwrap();
            prop_assert_eq!(patches.len(), rows * cols);
            prop_assert!(patches.iter().all(|p| p.field.dims == [3, 2, 4]));
            let back = assemble_patches(&patches, &layout).unwrap();
            prop_assert_eq!(back.values, f.values);
        } else {
            let patches = extract_patches(&f, &layout).unwrap();
            prop_assert!(patches.iter().all(|p| p.field.dims == [3, 2, depth]));
            for p in &patches {
                for k in 0..depth {
                    prop_assert_eq!(p.field.get(0, 0, k), f.get(p.row as usize * 3, p.col as usize * 2, k));
                }
            }
        }
    }

    #[test]
    fn split_partitions_keys_in_time(timesteps in 7u32..40, cells in 1u32..6, seed in 0u64..1000) {
        let keys: Vec<SampleKey> = (0..timesteps)
            .flat_map(|t| (0..cells).map(move |c| SampleKey { species_id: 0, time_index: t, row: 0, col: c }))
            .collect();
        let s = split_dataset(&keys, &SplitPolicy { seed, ..SplitPolicy::default() }).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..keys.len()).collect::<Vec<_>>());
        let last_trainval = s.train.iter().chain(&s.val).map(|&i| keys[i].time_index).max();
        let first_test = s.test.iter().map(|&i| keys[i].time_index).min();
        if let (Some(a), Some(b)) = (last_trainval, first_test) {
            prop_assert!(a < b);
        }
    }
}
