//! Train briefly, then compare the model with the persistence baseline
//! under both RMSE conventions and report the mass difference.

use advect_emu::config::ExperimentConfig;
use advect_emu::pipeline::{evaluate_model, generate};
use advect_emu::unet::{train, UNet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml(include_str!("../configs/small.toml"))?;
    let (data, _) = generate(&cfg)?;
    let (model, _) = train(UNet::<f32>::build(&cfg.unet)?, &data.train, &data.val, &cfg.train)?;
    let report = evaluate_model(&model, &data.test, &data.norm, cfg.root_n, &cfg.grid_spec()?, cfg.eval.batch_size)?;
    print!("{}", report.summary());
    Ok(())
}
