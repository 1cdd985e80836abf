//! Generate a small patch dataset, write it as AQG1 with its manifest and
//! read it back.

use advect_emu::config::ExperimentConfig;
use advect_emu::patch::{read_aqg, write_aqg, Provenance, SplitPart};
use advect_emu::pipeline::generate;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml(include_str!("../configs/small.toml"))?;
    let (data, stats) = generate(&cfg)?;
    print!("{}", stats.summary());

    let dir = std::env::temp_dir().join("advect_emu_patch_dataset");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("train.aqg");
    let provenance = Provenance {
        split: Some(SplitPart::Train),
        root_n: Some(cfg.root_n.n()),
        norm_params: Some(data.norm.clone()),
        ..Provenance::default()
    };
    let manifest = write_aqg(&data.train, &path, provenance)?;
    println!("wrote {} ({} samples, sha256 {})", path.display(), manifest.sample_count, manifest.checksum_sha256);

    let back = read_aqg(&path)?;
    assert_eq!(back.dataset.len(), data.train.len());
    let m = back.dataset.meta(0);
    println!(
        "first sample: species {} ({:?}) time {} patch ({}, {}), extreme {}, channels {:?}",
        m.species_id,
        m.kind,
        m.time_index,
        m.patch_row,
        m.patch_col,
        m.extreme,
        back.dataset.channel_names()
    );
    Ok(())
}
