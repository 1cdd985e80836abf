//! Experiment configuration: one TOML file drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::DomainSpec;
use crate::grid::GridSpec;
use crate::oracle::StepParams;
use crate::patch::{PatchLayout, SplitPolicy, SplitPart, Thresholds};
use crate::synth::SynthConfig;
use crate::unet::{count_params, TrainConfig, UNetConfig};
use crate::xform::{NormMode, RootSpec};

/// Built-in desk-scale configuration.
pub const DESK_TOML: &str = include_str!("../configs/desk.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
}

fn invalid(key: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), reason: reason.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Desk,
    PaperShape,
}

/// Grid with geometrically stretched layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub bottom_thickness: f64,
    pub thickness_growth: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { nx: 128, ny: 192, nz: 16, dx: 12_000.0, dy: 12_000.0, bottom_thickness: 40.0, thickness_growth: 1.2 }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<GridSpec, ConfigError> {
        GridSpec::stretched(self.nx, self.ny, self.nz, self.dx, self.dy, self.bottom_thickness, self.thickness_growth)
            .map_err(|e| invalid("grid", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub bench_warmup: usize,
    pub bench_repeats: usize,
    pub hist_bins: usize,
    /// Levels for which histograms are written.
    pub hist_levels: Vec<usize>,
    pub hist_split: SplitPart,
    /// Domain for the configured runtime extrapolation. Defaults to the
    /// experiment's own grid when absent.
    pub domain: Option<DomainSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            bench_warmup: 5,
            bench_repeats: 50,
            hist_bins: 64,
            hist_levels: vec![0, 15],
            hist_split: SplitPart::Test,
            domain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. It replaces the seeds of `synth`, `split`, `unet` and
    /// `train`.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Model states per species. Consecutive states form `timesteps - 1`
    /// input/output pairs.
    pub timesteps: usize,
    pub norm_mode: NormMode,
    pub root_n: RootSpec,
    pub grid: GridConfig,
    pub synth: SynthConfig,
    pub step: StepParams,
    pub patches: PatchLayout,
    pub thresholds: Thresholds,
    pub split: SplitPolicy,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20200901,
            output_dir: PathBuf::from("runs/desk"),
            timesteps: 48,
            norm_mode: NormMode::PerSpeciesPerLevel,
            root_n: RootSpec::CUBE,
            grid: GridConfig::default(),
            synth: SynthConfig::default(),
            step: StepParams::default(),
            patches: PatchLayout::default(),
            thresholds: Thresholds::default(),
            split: SplitPolicy::default(),
            unet: UNetConfig::default(),
            // Desk budget: four passes with small batches (more Adam steps
            // per pass) fit a 30 minute single-core training run.
            train: TrainConfig { batch_size: 8, epochs: 4, ..TrainConfig::default() },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let mut cfg: Self = toml::from_str(DESK_TOML).expect("bundled desk config parses");
        if p == Preset::PaperShape {
            cfg.unet = UNetConfig { init_seed: cfg.unet.init_seed, ..UNetConfig::paper_shape() };
            cfg.output_dir = PathBuf::from("runs/paper-shape");
        }
        let seed = cfg.seed;
        cfg.with_seed(seed)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_over(Preset::Desk, path)
    }

    /// Parse `text` with omitted keys taken from `preset`.
    pub fn from_toml_over(preset: Preset, text: &str) -> Result<Self, ConfigError> {
        if preset == Preset::Desk {
            return Self::from_toml(text);
        }
        let mut base = toml::Value::try_from(Self::preset(preset)).expect("config serializes");
        merge(&mut base, text.parse::<toml::Value>()?);
        let cfg: Self = base.try_into()?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_over(preset: Preset, path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        Self::from_toml_over(preset, &text)
    }

    /// Set the master seed and every stream derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self.unet.init_seed = seed;
        self
    }

    pub fn grid_spec(&self) -> Result<GridSpec, ConfigError> {
        self.grid.spec()
    }

    pub fn patch_dims(&self) -> Result<[usize; 3], ConfigError> {
        let g = &self.grid;
        self.patches.patch_dims([g.nx, g.ny, g.nz]).map_err(|e| {
            let key = match e {
                crate::patch::PatchError::Indivisible { axis: crate::grid::Axis::X, .. } => "patches.rows",
                crate::patch::PatchError::Indivisible { .. } => "patches.cols",
                _ => "patches.depth",
            };
            invalid(key, e)
        })
    }

    /// Input/output pairs per species.
    pub fn pair_count(&self) -> usize {
        self.timesteps.saturating_sub(1)
    }

    /// Runtime domain matching this experiment.
    pub fn desk_domain(&self) -> DomainSpec {
        self.eval.domain.clone().unwrap_or(DomainSpec {
            rows: self.patches.rows,
            cols: self.patches.cols,
            levels: self.grid.nz,
            patch_depth: self.patches.depth,
            species: self.synth.n_species,
            batch_size: self.eval.batch_size,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.grid_spec()?;
        self.synth.validate().map_err(|e| invalid("synth", e))?;
        self.step.validate().map_err(|e| invalid("step", e))?;
        let dims = self.patch_dims()?;
        if self.pair_count() < self.split.trainval_den as usize {
            return Err(invalid(
                "timesteps",
                format!("{} pairs cannot be cut {}/{}", self.pair_count(), self.split.trainval_num, self.split.trainval_den),
            ));
        }
        crate::patch::trainval_timesteps(self.pair_count(), &self.split).map_err(|e| invalid("split", e))?;
        if !(self.thresholds.ozone_ppm > 0.0) {
            return Err(invalid("thresholds.ozone_ppm", "must be positive"));
        }
        if !(self.thresholds.pm25_ugm3 > 0.0) {
            return Err(invalid("thresholds.pm25_ugm3", "must be positive"));
        }
        if self.unet.patch_dims != dims {
            return Err(invalid("unet.patch_dims", format!("{:?} differs from the patch extent {dims:?}", self.unet.patch_dims)));
        }
        let channels = crate::pipeline::CHANNEL_NAMES.len();
        if self.unet.in_channels != channels {
            return Err(invalid("unet.in_channels", format!("must be {channels} (concentration, u, v, w, layer thickness)")));
        }
        if self.unet.out_channels != 1 {
            return Err(invalid("unet.out_channels", "must be 1"));
        }
        count_params(&self.unet).map_err(|e| invalid("unet", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        if self.eval.batch_size == 0 {
            return Err(invalid("eval.batch_size", "must be positive"));
        }
        if self.eval.hist_bins == 0 {
            return Err(invalid("eval.hist_bins", "must be positive"));
        }
        if let Some(&k) = self.eval.hist_levels.iter().find(|&&k| k >= self.patches.depth) {
            return Err(invalid("eval.hist_levels", format!("level {k} is outside the patch depth {}", self.patches.depth)));
        }
        if let Some(d) = &self.eval.domain {
            d.validate().map_err(|e| invalid("eval.domain", e))?;
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_desk_config_is_default() {
        let cfg = ExperimentConfig::from_toml(DESK_TOML).unwrap();
        assert_eq!(cfg, ExperimentConfig::default().with_seed(cfg.seed));
        assert_eq!(ExperimentConfig::preset(Preset::Desk), cfg);
    }

    #[test]
    fn paper_shape_preset_widens_network() {
        let cfg = ExperimentConfig::preset(Preset::PaperShape);
        assert_eq!(cfg.unet.base_channels, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let cfg = ExperimentConfig::from_toml_over(Preset::PaperShape, "seed = 3\n[train]\nepochs = 1\n").unwrap();
        assert_eq!((cfg.unet.base_channels, cfg.train.epochs, cfg.unet.init_seed), (64, 1, 3));
        assert!(ExperimentConfig::from_toml_over(Preset::PaperShape, "[unet]\nwidth = 2\n").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[grid]\nnx = 128\nnzz = 4\n").unwrap_err();
        assert!(err.to_string().contains("nzz"), "{err}");
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn indivisible_patches_name_the_key() {
        let err = ExperimentConfig::from_toml("[patches]\nrows = 5\n").unwrap_err();
        match err {
            ConfigError::Invalid { key, reason } => {
                assert_eq!(key, "patches.rows");
                assert!(reason.contains("divisible"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn seed_propagates() {
        let cfg = ExperimentConfig::from_toml("seed = 5\n").unwrap();
        assert_eq!((cfg.synth.seed, cfg.split.seed, cfg.train.seed, cfg.unet.init_seed), (5, 5, 5, 5));
    }

    #[test]
    fn cross_section_checks() {
        let err = ExperimentConfig::from_toml("[unet]\npatch_dims = [16, 16, 16]\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "unet.patch_dims"));
        let err = ExperimentConfig::from_toml("timesteps = 5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "timesteps"));
        let err = ExperimentConfig::from_toml("root_n = 4\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }
}
