//! Train a small U-Net on generated patches and save a checkpoint.

use advect_emu::config::ExperimentConfig;
use advect_emu::pipeline::generate;
use advect_emu::unet::{load_checkpoint, save_checkpoint, train, UNet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = ExperimentConfig::from_toml(include_str!("../configs/small.toml"))?;
    let (data, _) = generate(&cfg)?;
    let model = UNet::<f32>::build(&cfg.unet)?;
    println!("{} parameters, level extents {:?}", model.num_params(), model.level_dims());

    let (model, history) = train(model, &data.train, &data.val, &cfg.train)?;
    print!("{}", history.to_csv());

    let path = std::env::temp_dir().join("advect_emu_small.ckpt");
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path)?;
    assert_eq!(back.params(), model.params());
    println!("checkpoint written to {}", path.display());
    Ok(())
}
