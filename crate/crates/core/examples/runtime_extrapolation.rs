//! Time inference for the configured network and scale the measurement to
//! a full continental domain.

use advect_emu::config::ExperimentConfig;
use advect_emu::eval::{bench_inference, extrapolate_runtime, DomainSpec};
use advect_emu::unet::UNet;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let conus = DomainSpec::conus();
    let reference = extrapolate_runtime(4.74, &conus)?;
    println!(
        "4.74 ms per batch of {}: {} patches, {} batches, {:.2} s per timestep",
        conus.batch_size, reference.total_patches, reference.batches, reference.seconds_per_timestep
    );

    let cfg = ExperimentConfig::from_toml(include_str!("../configs/small.toml"))?;
    let model = UNet::<f32>::build(&cfg.unet)?;
    let bench = bench_inference(&model, cfg.eval.batch_size, cfg.eval.bench_warmup, cfg.eval.bench_repeats)?;
    println!(
        "measured {:.2} ms per batch of {} (min {:.2}, max {:.2}) on {} threads",
        bench.ms_per_batch, bench.batch_size, bench.ms_min, bench.ms_max, bench.environment.threads
    );
    for (name, d) in [("configured", cfg.desk_domain()), ("continental", conus)] {
        let est = extrapolate_runtime(bench.ms_per_batch, &DomainSpec { batch_size: bench.batch_size, ..d })?;
        println!("{name}: {} batches, {:.3} s per timestep", est.batches, est.seconds_per_timestep);
    }
    Ok(())
}
