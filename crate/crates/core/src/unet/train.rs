use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{UNet, UnetError};
use crate::patch::PatchDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Reshuffle the training order every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 32, epochs: 20, seed: 20200901, shuffle: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), UnetError> {
        let bad = |m: String| Err(UnetError::InvalidTrain(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch losses, weighted by batch size.
    pub train_mse: f64,
    pub val_mse: f64,
    /// Share of validation predictions with magnitude above 1.
    pub val_frac_outside_unit: f64,
    /// Wall time; kept out of serialized output so reruns match.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_train_mse: f64,
    pub initial_val_mse: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub adam_eps: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse,val_frac_outside_unit\n");
        s.push_str(&format!("0,{},{},\n", self.initial_train_mse, self.initial_val_mse));
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_mse, e.val_mse, e.val_frac_outside_unit));
        }
        s
    }

    pub fn final_train_mse(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_mse, |e| e.train_mse)
    }
}

fn gather(ds: &PatchDataset, idx: &[usize], inputs: &mut Vec<f32>, targets: &mut Vec<f32>) {
    let (in_len, n) = (ds.channels() * ds.voxels(), ds.voxels());
    inputs.resize(idx.len() * in_len, 0.0);
    targets.resize(idx.len() * n, 0.0);
    for (b, &i) in idx.iter().enumerate() {
        ds.write_input(i, &mut inputs[b * in_len..(b + 1) * in_len]);
        targets[b * n..(b + 1) * n].copy_from_slice(ds.target(i));
    }
}

fn check_compatible(model: &UNet<f32>, ds: &PatchDataset) -> Result<(), UnetError> {
    let cfg = model.config();
    if ds.channels() != cfg.in_channels || ds.dims() != cfg.patch_dims || cfg.out_channels != 1 {
        return Err(UnetError::InvalidConfig(format!(
            "dataset has {} channels of {:?}; network expects {} channels of {:?} and {} output",
            ds.channels(),
            ds.dims(),
            cfg.in_channels,
            cfg.patch_dims,
            cfg.out_channels
        )));
    }
    Ok(())
}

/// Run the model over `ds` in order, handing each sample's prediction to
/// `visit`.
pub fn for_each_prediction(
    model: &UNet<f32>,
    ds: &PatchDataset,
    batch_size: usize,
    mut visit: impl FnMut(usize, &[f32]),
) -> Result<(), UnetError> {
    check_compatible(model, ds)?;
    let n = ds.voxels();
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        gather(ds, chunk, &mut inputs, &mut targets);
        let pred = model.forward(&inputs, chunk.len())?;
        for (b, &i) in chunk.iter().enumerate() {
            visit(i, &pred[b * n..(b + 1) * n]);
        }
    }
    Ok(())
}

/// All predictions, `[len, px, py, pz]`.
pub fn predict_dataset(model: &UNet<f32>, ds: &PatchDataset, batch_size: usize) -> Result<Vec<f32>, UnetError> {
    let mut out = vec![0.0; ds.len() * ds.voxels()];
    let n = ds.voxels();
    for_each_prediction(model, ds, batch_size, |i, p| out[i * n..(i + 1) * n].copy_from_slice(p))?;
    Ok(out)
}

/// Mean squared error against the targets and the share of predictions
/// with magnitude above 1.
pub fn evaluate_mse(model: &UNet<f32>, ds: &PatchDataset, batch_size: usize) -> Result<(f64, f64), UnetError> {
    if ds.is_empty() {
        return Ok((f64::NAN, 0.0));
    }
    if model.predicts_zero() {
        check_compatible(model, ds)?;
        let sse: f64 = (0..ds.len()).flat_map(|i| ds.target(i)).map(|&t| (t as f64).powi(2)).sum();
        return Ok((sse / (ds.len() * ds.voxels()) as f64, 0.0));
    }
    let (mut sse, mut outside) = (0.0, 0usize);
    for_each_prediction(model, ds, batch_size, |i, p| {
        for (&y, &t) in p.iter().zip(ds.target(i)) {
            sse += ((y - t) as f64).powi(2);
            outside += (y.abs() > 1.0) as usize;
        }
    })?;
    let total = (ds.len() * ds.voxels()) as f64;
    Ok((sse / total, outside as f64 / total))
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl Adam {
    fn update(&mut self, params: &mut [f32], grad: &[f32], tc: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (tc.beta1 as f32, tc.beta2 as f32);
        let c1 = (1.0 - tc.beta1.powi(self.step)) as f32;
        let c2 = (1.0 - tc.beta2.powi(self.step)) as f32;
        let (lr, eps) = (tc.lr as f32, tc.eps as f32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Train with Adam on mean squared error, keeping the parameters with the
/// lowest validation loss.
pub fn train(
    mut model: UNet<f32>,
    train_ds: &PatchDataset,
    val_ds: &PatchDataset,
    tc: &TrainConfig,
) -> Result<(UNet<f32>, TrainHistory), UnetError> {
    tc.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(UnetError::InvalidTrain(format!(
            "training and validation sets must be non-empty (got {} and {})",
            train_ds.len(),
            val_ds.len()
        )));
    }
    check_compatible(&model, train_ds)?;
    check_compatible(&model, val_ds)?;
    let eval_batch = tc.batch_size.max(8);
    let (initial_train_mse, _) = evaluate_mse(&model, train_ds, eval_batch)?;
    let (initial_val_mse, _) = evaluate_mse(&model, val_ds, eval_batch)?;
    let mut history = TrainHistory { initial_train_mse, initial_val_mse, adam_eps: tc.eps, ..Default::default() };
    log::info!("initial train mse {initial_train_mse:.6e}, val mse {initial_val_mse:.6e}");

    let mut adam = Adam { m: vec![0.0; model.num_params()], v: vec![0.0; model.num_params()], step: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    let mut best: Option<(f64, Vec<f32>)> = None;

    for epoch in 1..=tc.epochs {
        let start = Instant::now();
        if tc.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sse = 0.0;
        for (bi, batch) in order.chunks(tc.batch_size).enumerate() {
            gather(train_ds, batch, &mut inputs, &mut targets);
            let (loss, grad) = model.loss_and_grad(&inputs, &targets, batch.len())?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(UnetError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    metas: batch.iter().map(|&i| *train_ds.meta(i)).collect(),
                });
            }
            sse += loss * batch.len() as f64;
            adam.update(model.params_mut(), &grad, tc);
        }
        let train_mse = sse / train_ds.len() as f64;
        let (val_mse, frac) = evaluate_mse(&model, val_ds, eval_batch)?;
        let rec = EpochRecord { epoch, train_mse, val_mse, val_frac_outside_unit: frac, seconds: start.elapsed().as_secs_f64() };
        log::info!(
            "epoch {epoch}: train mse {train_mse:.6e}, val mse {val_mse:.6e}, |pred|>1 {frac:.2e}, {:.1}s",
            rec.seconds
        );
        if frac > 0.0 {
            log::warn!("epoch {epoch}: {:.3}% of validation predictions fall outside [-1, 1]", 100.0 * frac);
        }
        history.epochs.push(rec);
        if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
            best = Some((val_mse, model.params().to_vec()));
            history.best_epoch = Some(epoch);
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().copy_from_slice(&params);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpeciesKind;
    use crate::patch::SampleMeta;
    use crate::unet::UNetConfig;

    fn cfg() -> UNetConfig {
        UNetConfig { levels: 2, base_channels: 2, in_channels: 2, patch_dims: [4, 4, 4], ..Default::default() }
    }

    fn dataset(count: usize) -> PatchDataset {
        let mut ds = PatchDataset::new(vec!["c".into(), "u".into()], [4, 4, 4]);
        let aux = ds.intern_aux(&[0.5; 64]).unwrap();
        for s in 0..count {
            let conc: Vec<f32> = (0..64).map(|i| ((i * (s + 3)) % 17) as f32 / 17.0).collect();
            let target: Vec<f32> = conc.iter().map(|c| 0.3 * (c - 0.5)).collect();
            let meta = SampleMeta { species_id: 0, kind: SpeciesKind::Ozone, time_index: s as u32, patch_row: 0, patch_col: 0, extreme: false };
            ds.push(meta, &conc, aux, &target).unwrap();
        }
        ds
    }

    #[test]
    fn zero_lr_leaves_params() {
        let model = UNet::<f32>::build(&cfg()).unwrap();
        let before = model.params().to_vec();
        let tc = TrainConfig { lr: 0.0, epochs: 1, batch_size: 3, ..Default::default() };
        let (after, hist) = train(model, &dataset(6), &dataset(2), &tc).unwrap();
        assert_eq!(after.params(), &before[..]);
        assert_eq!(hist.epochs.len(), 1);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let model = UNet::<f32>::build(&cfg()).unwrap();
        let before = model.clone();
        let (after, hist) = train(model, &dataset(4), &dataset(2), &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(after, before);
        assert!(hist.epochs.is_empty());
    }

    #[test]
    fn initial_mse_is_mean_square_target() {
        let ds = dataset(3);
        let model = UNet::<f32>::build(&cfg()).unwrap();
        let (mse, _) = evaluate_mse(&model, &ds, 2).unwrap();
        let want: f64 = (0..3).flat_map(|i| ds.target(i)).map(|&t| (t as f64).powi(2)).sum::<f64>() / 192.0;
        assert!((mse - want).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let tc = TrainConfig { epochs: 15, batch_size: 2, lr: 3e-3, ..Default::default() };
        let run = || train(UNet::<f32>::build(&cfg()).unwrap(), &dataset(8), &dataset(3), &tc).unwrap();
        let (a, ha) = run();
        let (b, hb) = run();
        assert!(ha.final_train_mse() < ha.initial_train_mse);
        let untimed = |h: &TrainHistory| {
            let mut h = h.clone();
            h.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
            h
        };
        assert_eq!(untimed(&ha), untimed(&hb));
        assert_eq!(a.params(), b.params());
        assert!(hb.to_csv().lines().count() == 17);
    }

    #[test]
    fn rejects_bad_config_and_empty_sets() {
        let m = || UNet::<f32>::build(&cfg()).unwrap();
        assert!(train(m(), &dataset(0), &dataset(2), &TrainConfig::default()).is_err());
        let tc = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(train(m(), &dataset(2), &dataset(2), &tc), Err(UnetError::InvalidTrain(_))));
    }

    #[test]
    fn non_finite_loss_reports_batch() {
        let mut ds = PatchDataset::new(vec!["c".into(), "u".into()], [4, 4, 4]);
        let aux = ds.intern_aux(&[0.5; 64]).unwrap();
        let meta = SampleMeta { species_id: 9, kind: SpeciesKind::Pm, time_index: 4, patch_row: 1, patch_col: 2, extreme: true };
        ds.push(meta, &[0.1; 64], aux, &[f32::NAN; 64]).unwrap();
        let err = train(UNet::<f32>::build(&cfg()).unwrap(), &ds, &dataset(1), &TrainConfig { epochs: 1, ..Default::default() });
        match err.unwrap_err() {
            UnetError::NonFiniteLoss { metas, .. } => assert_eq!(metas, vec![meta]),
            other => panic!("unexpected {other}"),
        }
    }
}
