//! End-to-end commands: generate, train, evaluate, benchmark, histogram.
//!
//! Each command reads and writes files under an output directory and
//! records what it wrote, with checksums, in `manifest_<command>.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{
    bench_inference, emit_report, extrapolate_runtime, histogram, mass_pct_diff, ConventionReport, DomainSpec,
    EvalError, MassAccumulator, MetricsReport, RmseAccumulator, RmseConvention, Timing,
};
use crate::grid::{GridSpec, SpeciesField, SpeciesKind, WindField};
use crate::oracle::{cfl_number, dataset_wind, gen_species_pairs};
use crate::patch::{
    classify_extreme, extract_patches, read_aqg, split_dataset, write_aqg, AqgFile, PatchDataset, Provenance, SampleKey,
    SampleMeta, SplitPart,
};
use crate::unet::{for_each_prediction, load_checkpoint_expecting, save_checkpoint, train, TrainHistory, UNet};
use crate::xform::{root_diff_target, NormFitter, NormMode, NormParams, PatchId, RootSpec, ValueRange, ROOT_EXCEEDANCE_EPS};

pub const CHANNEL_NAMES: [&str; 5] = ["concentration", "wind_u", "wind_v", "wind_w", "layer_thickness"];

pub fn split_file_name(part: SplitPart) -> &'static str {
    match part {
        SplitPart::Train => "train.aqg",
        SplitPart::Val => "val.aqg",
        SplitPart::Test => "test.aqg",
    }
}

/// Generated samples, split and normalized.
#[derive(Debug, Clone)]
pub struct SplitDatasets {
    pub train: PatchDataset,
    pub val: PatchDataset,
    pub test: PatchDataset,
    pub norm: NormParams,
}

impl SplitDatasets {
    pub fn part(&self, part: SplitPart) -> &PatchDataset {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub samples: u64,
    pub extreme: u64,
    pub nonextreme: u64,
}

impl StratumCounts {
    pub fn of(ds: &PatchDataset) -> Self {
        let extreme = ds.count_extreme() as u64;
        Self { samples: ds.len() as u64, extreme, nonextreme: ds.len() as u64 - extreme }
    }
}

/// Standard deviations of raw normalized differences and of their roots,
/// over every generated cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SpreadCheck {
    pub cells: u64,
    pub std_difference: f64,
    pub std_root: f64,
}

impl SpreadCheck {
    pub fn holds(&self) -> bool {
        self.std_root > self.std_difference
    }
}

#[derive(Default)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn add(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn std(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let mean = self.sum / self.n as f64;
        (self.sum_sq / self.n as f64 - mean * mean).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub train: StratumCounts,
    pub val: StratumCounts,
    pub test: StratumCounts,
    pub spread: SpreadCheck,
    pub cfl: f64,
    /// Cells normalized outside `[0, 1]` (data outside the fitted range).
    pub norm_exceedances: u64,
    /// Targets beyond `±(1 + ROOT_EXCEEDANCE_EPS)`.
    pub root_exceedances: u64,
}

impl GenStats {
    pub fn total(&self) -> StratumCounts {
        let add = |a: StratumCounts, b: StratumCounts| StratumCounts {
            samples: a.samples + b.samples,
            extreme: a.extreme + b.extreme,
            nonextreme: a.nonextreme + b.nonextreme,
        };
        add(add(self.train, self.val), self.test)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (name, c) in [("train", self.train), ("val", self.val), ("test", self.test), ("total", self.total())] {
            s.push_str(&format!("{name:>5}: {} patches, {} extreme, {} non-extreme\n", c.samples, c.extreme, c.nonextreme));
        }
        s.push_str(&format!(
            "spread: std of differences {:.4e}, std of roots {:.4e}\nCFL {:.3}\n",
            self.spread.std_difference, self.spread.std_root, self.cfl
        ));
        s
    }
}

fn unit_scale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
}

/// Static channels (u, v, w, layer thickness), each scaled to `[0, 1]` over
/// the whole grid, cut into one block per patch position.
fn static_blocks(grid: &GridSpec, wind: &WindField, cfg: &ExperimentConfig) -> Result<Vec<Vec<f32>>> {
    let dims = grid.dims();
    let thickness = unit_scale(&grid.layer_thickness);
    let channels = [
        unit_scale(&wind.u),
        unit_scale(&wind.v),
        unit_scale(&wind.w),
        SpeciesField::from_fn(dims, 0, SpeciesKind::Ozone, |_, _, k| thickness[k]).values,
    ];
    let mut blocks = vec![Vec::new(); cfg.patches.patches_per_field()];
    for values in channels {
        let field = SpeciesField::new(dims, values, 0, SpeciesKind::Ozone)?;
        for (b, p) in extract_patches(&field, &cfg.patches)?.into_iter().enumerate() {
            blocks[b].extend(p.field.values.iter().map(|&v| v as f32));
        }
    }
    Ok(blocks)
}

/// Run the synthetic generator, the transport oracle and patch extraction,
/// then normalize and split. Normalization statistics come from training
/// patches only, unless each patch is normalized on its own.
pub fn generate(cfg: &ExperimentConfig) -> Result<(SplitDatasets, GenStats)> {
    cfg.validate()?;
    let grid = cfg.grid_spec()?;
    let dims = cfg.patch_dims()?;
    let layout = cfg.patches;
    let (rows, cols, steps) = (layout.rows, layout.cols, cfg.pair_count());
    let wind = dataset_wind(&grid, &cfg.synth)?;
    let cfl = cfl_number(&wind, &grid, cfg.step.dt)?;
    log::info!("wind max speed {:.2} m/s, CFL {cfl:.3}", wind.max_horizontal_speed());

    let keys: Vec<SampleKey> = (0..cfg.synth.n_species as u32)
        .flat_map(|species_id| {
            (0..steps as u32).flat_map(move |time_index| {
                (0..rows as u32).flat_map(move |row| (0..cols as u32).map(move |col| SampleKey { species_id, time_index, row, col }))
            })
        })
        .collect();
    let split = split_dataset(&keys, &cfg.split)?;
    let mut part_of = vec![SplitPart::Test; keys.len()];
    for (list, part) in [(&split.train, SplitPart::Train), (&split.val, SplitPart::Val)] {
        for &i in list {
            part_of[i] = part;
        }
    }

    let names: Vec<String> = CHANNEL_NAMES.iter().map(|s| s.to_string()).collect();
    let mut sets = [PatchDataset::new(names.clone(), dims), PatchDataset::new(names.clone(), dims), PatchDataset::new(names, dims)];
    let blocks = static_blocks(&grid, &wind, cfg)?;
    let mut aux_ids = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let ids: Vec<u32> = sets.iter_mut().map(|s| s.intern_aux(b)).collect::<Result<_, _>>()?;
        aux_ids.push(ids);
    }
    let set_index = |p: SplitPart| match p {
        SplitPart::Train => 0,
        SplitPart::Val => 1,
        SplitPart::Test => 2,
    };

    let mut norm = NormParams { mode: cfg.norm_mode, groups: BTreeMap::new() };
    let (mut diffs, mut roots) = (Moments::default(), Moments::default());
    let (mut norm_exceedances, mut root_exceedances) = (0u64, 0u64);
    for species in 0..cfg.synth.n_species as u32 {
        let start = Instant::now();
        let pairs = gen_species_pairs(&grid, &cfg.synth, &cfg.step, steps, species, &wind)?;
        let key_of = |t: usize, b: usize| (species as usize * steps + t) * rows * cols + b;

        let mut fitter = NormFitter::new(cfg.norm_mode);
        for (t, pair) in pairs.iter().enumerate() {
            let inputs = extract_patches(&pair.input, &layout)?;
            if cfg.norm_mode == NormMode::PerPatch {
                for p in &inputs {
                    fitter.observe(&p.field, Some(PatchId { time_index: t as u32, row: p.row, col: p.col }))?;
                }
                continue;
            }
            let outputs = extract_patches(&pair.output, &layout)?;
            for (b, (i, o)) in inputs.iter().zip(&outputs).enumerate() {
                if part_of[key_of(t, b)] == SplitPart::Train {
                    fitter.observe(&i.field, None)?;
                    fitter.observe(&o.field, None)?;
                }
            }
        }
        let params = fitter.finish()?;

        for (t, pair) in pairs.iter().enumerate() {
            let inputs = extract_patches(&pair.input, &layout)?;
            let outputs = extract_patches(&pair.output, &layout)?;
            for (b, (i, o)) in inputs.iter().zip(&outputs).enumerate() {
                let pid = (cfg.norm_mode == NormMode::PerPatch).then_some(PatchId { time_index: t as u32, row: i.row, col: i.col });
                let xi = params.apply(&i.field, pid, ValueRange::UNIT)?;
                let xo = params.apply(&o.field, pid, ValueRange::UNIT)?;
                norm_exceedances += (xi.exceedances + xo.exceedances) as u64;
                let target = root_diff_target(&xi.field.values, &xo.field.values, cfg.root_n)?;
                for ((a, z), r) in xi.field.values.iter().zip(&xo.field.values).zip(&target) {
                    diffs.add(z - a);
                    roots.add(*r);
                    root_exceedances += (r.abs() > 1.0 + ROOT_EXCEEDANCE_EPS) as u64;
                }
                let meta = SampleMeta {
                    species_id: species,
                    kind: i.field.kind,
                    time_index: t as u32,
                    patch_row: i.row,
                    patch_col: i.col,
                    extreme: classify_extreme(&i.field, &cfg.thresholds),
                };
                let part = set_index(part_of[key_of(t, b)]);
                let conc: Vec<f32> = xi.field.values.iter().map(|&v| v as f32).collect();
                let target: Vec<f32> = target.iter().map(|&v| v as f32).collect();
                sets[part].push(meta, &conc, aux_ids[b][part], &target)?;
            }
        }
        norm.groups.extend(params.groups);
        log::info!("species {species}: {} pairs in {:.1}s", pairs.len(), start.elapsed().as_secs_f64());
    }

    let [train, val, test] = sets;
    let stats = GenStats {
        train: StratumCounts::of(&train),
        val: StratumCounts::of(&val),
        test: StratumCounts::of(&test),
        spread: SpreadCheck { cells: diffs.n, std_difference: diffs.std(), std_root: roots.std() },
        cfl,
        norm_exceedances,
        root_exceedances,
    };
    Ok((SplitDatasets { train, val, test, norm }, stats))
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub files: Vec<FileRecord>,
    pub config: serde_json::Value,
}

fn write_run_manifest(out: &Path, command: &str, cfg: &ExperimentConfig, files: &[PathBuf]) -> Result<RunManifest> {
    let mut records = Vec::new();
    for f in files {
        let name = f.strip_prefix(out).unwrap_or(f).display().to_string();
        records.push(FileRecord { path: name, sha256: sha256_file(f)? });
    }
    let manifest = RunManifest { command: command.into(), files: records, config: cfg.echo() };
    let path = out.join(format!("manifest_{command}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    Ok(manifest)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Generate and write `train.aqg`, `val.aqg` and `test.aqg` with manifests.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<GenStats> {
    let (data, stats) = generate(cfg)?;
    create_dir(out)?;
    let mut files = Vec::new();
    for part in [SplitPart::Train, SplitPart::Val, SplitPart::Test] {
        let path = out.join(split_file_name(part));
        let provenance = Provenance {
            split: Some(part),
            root_n: Some(cfg.root_n.n()),
            norm_params: Some(data.norm.clone()),
            thresholds: Some(cfg.thresholds),
            synth: Some(cfg.synth.clone()),
            experiment: Some(cfg.echo()),
        };
        write_aqg(data.part(part), &path, provenance)?;
        files.push(crate::patch::manifest_path(&path));
        files.push(path);
    }
    let summary = out.join("gen_summary.json");
    write_text(&summary, &serde_json::to_string_pretty(&stats)?)?;
    files.push(summary);
    write_run_manifest(out, "gen", cfg, &files)?;
    Ok(stats)
}

/// Read one split written by [`cmd_gen`].
pub fn load_split(data_dir: &Path, part: SplitPart) -> Result<AqgFile> {
    let path = data_dir.join(split_file_name(part));
    if !path.exists() {
        return Err(Error::Missing { path, reason: "run `gen` first".into() });
    }
    Ok(read_aqg(&path)?)
}

fn norm_of(file: &AqgFile, path: &Path) -> Result<(NormParams, RootSpec)> {
    let prov = file.manifest.as_ref().map(|m| &m.provenance);
    let norm = prov.and_then(|p| p.norm_params.clone());
    let root = prov.and_then(|p| p.root_n);
    match (norm, root) {
        (Some(n), Some(r)) => Ok((n, RootSpec::new(r)?)),
        _ => Err(Error::Missing { path: path.to_owned(), reason: "manifest lacks normalization parameters or root order".into() }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub history: TrainHistory,
    pub params: usize,
    pub resumed_from: Option<String>,
    /// Final training loss below the initial one.
    pub loss_decreased: bool,
    /// Epochs whose training loss fell below the previous epoch's.
    pub improving_epochs: usize,
}

/// Train on `train.aqg`/`val.aqg` and write `model.ckpt`, `history.csv` and
/// `train_summary.json`. With `resume`, training starts from that
/// checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_set = load_split(data_dir, SplitPart::Train)?.dataset;
    let val_set = load_split(data_dir, SplitPart::Val)?.dataset;
    let model = match resume {
        Some(p) => load_checkpoint_expecting(p, &cfg.unet)?,
        None => UNet::<f32>::build(&cfg.unet)?,
    };
    let (model, history) = train(model, &train_set, &val_set, &cfg.train)?;
    create_dir(out)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let csv = out.join("history.csv");
    write_text(&csv, &history.to_csv())?;
    let mut improving = 0;
    let mut last = history.initial_train_mse;
    for e in &history.epochs {
        improving += (e.train_mse < last) as usize;
        last = e.train_mse;
    }
    let summary = TrainSummary {
        loss_decreased: history.final_train_mse() < history.initial_train_mse,
        improving_epochs: improving,
        params: model.num_params(),
        resumed_from: resume.map(|p| p.display().to_string()),
        history,
    };
    let json = out.join("train_summary.json");
    write_text(&json, &serde_json::to_string_pretty(&summary)?)?;
    write_run_manifest(out, "train", cfg, &[ckpt, csv, json])?;
    Ok(summary)
}

/// Score `model` on `test`, with the persistence baseline alongside.
pub fn evaluate_model(
    model: &UNet<f32>,
    test: &PatchDataset,
    norm: &NormParams,
    root: RootSpec,
    grid: &GridSpec,
    batch_size: usize,
) -> Result<MetricsReport> {
    let dims = test.dims();
    let patch_grid = grid.patch_grid(dims[0], dims[1], dims[2])?;
    let mut model_acc = [RmseConvention::NormalizedOutput, RmseConvention::RootSpace].map(|c| RmseAccumulator::new(c, root));
    let mut pers_acc = model_acc;
    let zeros = vec![0.0f32; test.voxels()];
    let mut mass: BTreeMap<u32, MassAccumulator> = BTreeMap::new();
    let mut range_exceedances = 0u64;
    let mut failure: Option<Error> = None;
    for_each_prediction(model, test, batch_size, |i, pred| {
        if failure.is_some() {
            return;
        }
        let m = test.meta(i);
        let (x, t) = (test.concentration(i), test.target(i));
        for acc in &mut model_acc {
            acc.add(x, pred, t, m.extreme);
        }
        for acc in &mut pers_acc {
            acc.add(x, &zeros, t, m.extreme);
        }
        range_exceedances += pred.iter().filter(|p| p.abs() as f64 > 1.0 + ROOT_EXCEEDANCE_EPS).count() as u64;
        let rebuild = |r: &[f32]| {
            let values = x.iter().zip(r).map(|(&a, &b)| a as f64 + root.power(b as f64)).collect();
            SpeciesField::new(dims, values, m.species_id, m.kind)
        };
        let pid = (norm.mode == NormMode::PerPatch).then_some(PatchId { time_index: m.time_index, row: m.patch_row, col: m.patch_col });
        let result = (|| -> Result<Option<f64>> { Ok(mass_pct_diff(&rebuild(pred)?, &rebuild(t)?, norm, pid, &patch_grid)?) })();
        match result {
            Ok(p) => mass.entry(m.species_id).or_insert_with(|| MassAccumulator::new(m.species_id)).add(p),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let mass = mass.values().map(|m| m.finish()).collect::<Result<Vec<_>, EvalError>>()?;
    Ok(MetricsReport {
        normalized_output: ConventionReport { model: model_acc[0].finish(), persistence: pers_acc[0].finish() },
        root_space: ConventionReport { model: model_acc[1].finish(), persistence: pers_acc[1].finish() },
        mass,
        range_exceedances,
        root_n: root.n(),
        timing: None,
        checksums: Vec::new(),
        config: serde_json::Value::Null,
    })
}

/// Evaluate a checkpoint on `test.aqg` and write `report.json` and
/// `summary.txt`. The report holds no timings, so reruns are byte-identical.
pub fn cmd_eval(cfg: &ExperimentConfig, data_dir: &Path, checkpoint: &Path, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let test_path = data_dir.join(split_file_name(SplitPart::Test));
    let file = load_split(data_dir, SplitPart::Test)?;
    let (norm, root) = norm_of(&file, &test_path)?;
    let model = load_checkpoint_expecting(checkpoint, &cfg.unet)?;
    let mut report = evaluate_model(&model, &file.dataset, &norm, root, &cfg.grid_spec()?, cfg.eval.batch_size)?;
    report.checksums = vec![
        ("test.aqg".into(), file.manifest.as_ref().map(|m| m.checksum_sha256.clone()).unwrap_or_default()),
        ("checkpoint".into(), sha256_file(checkpoint)?),
    ];
    report.config = cfg.echo();
    let files = emit_report(&report, out)?;
    write_run_manifest(out, "eval", cfg, &files)?;
    Ok(report)
}

/// Time inference and extrapolate to the configured and the continental
/// domains. Without a checkpoint a freshly built network is timed.
pub fn cmd_bench(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Timing> {
    cfg.validate()?;
    let model = match checkpoint {
        Some(p) => load_checkpoint_expecting(p, &cfg.unet)?,
        None => UNet::<f32>::build(&cfg.unet)?,
    };
    let bench = bench_inference(&model, cfg.eval.batch_size, cfg.eval.bench_warmup, cfg.eval.bench_repeats)?;
    let configured = extrapolate_runtime(bench.ms_per_batch, &cfg.desk_domain())?;
    let conus = extrapolate_runtime(bench.ms_per_batch, &DomainSpec { batch_size: bench.batch_size, ..DomainSpec::conus() })?;
    let timing = Timing { bench, configured, conus };
    create_dir(out)?;
    let path = out.join("bench.json");
    write_text(&path, &serde_json::to_string_pretty(&timing)?)?;
    write_run_manifest(out, "bench", cfg, &[path])?;
    Ok(timing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistEntry {
    pub species_id: u32,
    pub level: usize,
    /// Occupied-bin span of raw differences and of root-transformed
    /// differences, both binned over `[-1, 1]`.
    pub difference_span: usize,
    pub root_span: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistSummary {
    pub files: Vec<String>,
    pub entries: Vec<HistEntry>,
}

/// Histograms of the input, output, difference and root-difference stages
/// for each species and configured level, plus the root-order sweep.
pub fn cmd_hist(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<HistSummary> {
    cfg.validate()?;
    let part = cfg.eval.hist_split;
    let path = data_dir.join(split_file_name(part));
    let file = load_split(data_dir, part)?;
    let (_, root) = norm_of(&file, &path)?;
    let ds = &file.dataset;
    let hist_dir = out.join("hist");
    create_dir(&hist_dir)?;
    let pz = ds.dims()[2];
    let species: BTreeSet<u32> = ds.metas().iter().map(|m| m.species_id).collect();
    let (mut files, mut entries) = (Vec::new(), Vec::new());
    for &s in &species {
        let samples: Vec<usize> = (0..ds.len()).filter(|&i| ds.meta(i).species_id == s).collect();
        for &k in &cfg.eval.hist_levels {
            let (mut input, mut diff) = (Vec::new(), Vec::new());
            for &i in &samples {
                let (x, t) = (ds.concentration(i), ds.target(i));
                for c in (k..x.len()).step_by(pz) {
                    input.push(x[c] as f64);
                    diff.push(root.power(t[c] as f64));
                }
            }
            let output: Vec<f64> = input.iter().zip(&diff).map(|(a, d)| a + d).collect();
            let rooted: Vec<f64> = diff.iter().map(|&d| root.root(d)).collect();
            let unit = Some((-1.0, 1.0));
            let bins = cfg.eval.hist_bins;
            let mut stages = vec![
                ("input".to_string(), histogram(&input, bins, None, true)?),
                ("output".to_string(), histogram(&output, bins, None, true)?),
                ("difference".to_string(), histogram(&diff, bins, unit, true)?),
                ("root_difference".to_string(), histogram(&rooted, bins, unit, true)?),
            ];
            entries.push(HistEntry {
                species_id: s,
                level: k,
                difference_span: stages[2].1.occupied_span(),
                root_span: stages[3].1.occupied_span(),
            });
            for n in RootSpec::SWEEP {
                let r = RootSpec::new(n)?;
                let v: Vec<f64> = diff.iter().map(|&d| r.root(d)).collect();
                stages.push((format!("sweep_n{n}"), histogram(&v, bins, unit, true)?));
            }
            for (stage, h) in stages {
                let p = hist_dir.join(format!("species{s:02}_level{k:02}_{stage}.csv"));
                write_text(&p, &h.to_csv())?;
                files.push(p);
            }
        }
    }
    let summary = HistSummary { files: files.iter().map(|f| f.strip_prefix(out).unwrap_or(f).display().to_string()).collect(), entries };
    let spath = out.join("hist_summary.json");
    write_text(&spath, &serde_json::to_string_pretty(&summary)?)?;
    files.push(spath);
    write_run_manifest(out, "hist", cfg, &files)?;
    Ok(summary)
}
