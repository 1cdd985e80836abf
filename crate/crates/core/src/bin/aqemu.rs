use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use advect_emu::config::{ExperimentConfig, Preset};
use advect_emu::pipeline;
use advect_emu::Result;

#[derive(Parser)]
#[command(name = "aqemu", version, about = "Generate transport data, train and score a 3D U-Net advection emulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML). Omitted keys take the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: PresetArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    PaperShape,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test patch datasets.
    Gen,
    /// Train on the generated datasets.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time inference and extrapolate per-timestep runtime.
    Bench {
        /// Without one, a freshly initialized network is timed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write value histograms for each transform stage.
    Hist,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let preset = match cli.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::PaperShape => Preset::PaperShape,
    };
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load_over(preset, path)?,
        None => ExperimentConfig::preset(preset),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(advect_emu::config::ConfigError::Invalid { key: "--threads".into(), reason: "must be positive".into() }.into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("thread pool is configured once");
    }
    let cfg = load_config(cli)?;
    let out: &Path = &cfg.output_dir;
    match &cli.command {
        Command::Gen => {
            let stats = pipeline::cmd_gen(&cfg, out)?;
            print!("{}", stats.summary());
        }
        Command::Train { resume } => {
            let s = pipeline::cmd_train(&cfg, out, out, resume.as_deref())?;
            println!(
                "trained {} parameters for {} epochs; best epoch {}; train MSE {:.4e} -> {:.4e} ({})",
                s.params,
                s.history.epochs.len(),
                s.history.best_epoch.map_or_else(|| "none".to_string(), |e| e.to_string()),
                s.history.initial_train_mse,
                s.history.final_train_mse(),
                if s.loss_decreased { "decreasing" } else { "not decreasing" }
            );
        }
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
            let report = pipeline::cmd_eval(&cfg, out, &ckpt, out)?;
            print!("{}", report.summary());
        }
        Command::Bench { checkpoint } => {
            let t = pipeline::cmd_bench(&cfg, checkpoint.as_deref(), out)?;
            println!(
                "{:.3} ms per batch of {}; configured domain {:.3} s per timestep; continental domain {:.3} s per timestep",
                t.bench.ms_per_batch, t.bench.batch_size, t.configured.seconds_per_timestep, t.conus.seconds_per_timestep
            );
        }
        Command::Hist => {
            let s = pipeline::cmd_hist(&cfg, out, out)?;
            for e in &s.entries {
                println!(
                    "species {} level {}: difference spans {} bins, root difference spans {} bins",
                    e.species_id, e.level, e.difference_span, e.root_span
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
