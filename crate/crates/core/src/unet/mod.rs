//! 3D U-Net emulator, its training loop and checkpoint files.
//!
//! Each resolution level applies two 3×3×3 convolutions with rectified
//! activations, then 2× max pooling. The decoder mirrors it with transposed
//! convolutions and skip concatenation, and a 1×1×1 projection produces the
//! output. An axis that has already shrunk to extent 1 is no longer pooled,
//! so a depth-16 patch survives four levels.

mod checkpoint;
pub mod ops;
mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use train::{evaluate_mse, for_each_prediction, predict_dataset, train, EpochRecord, TrainConfig, TrainHistory};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Axis, AXES};
use crate::patch::SampleMeta;
use ops::{maxpool, maxpool_backward, relu_backward, voxels, Conv, Real, UpConv};

/// Samples per gradient partial sum. Partial sums are reduced in a fixed
/// order, so gradients do not depend on the thread count.
const GRAD_GROUP: usize = 4;

#[derive(Debug, Error)]
pub enum UnetError {
    #[error("axis {axis} has odd extent {size} at level {level} and cannot be pooled by 2")]
    Indivisible { axis: Axis, size: usize, level: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("batch shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch}; samples: {metas:?}")]
    NonFiniteLoss { epoch: usize, batch: usize, metas: Vec<SampleMeta> },
    #[error("invalid training config: {0}")]
    InvalidTrain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Identity,
    Tanh,
}

impl FinalActivation {
    pub fn code(self) -> u8 {
        match self {
            FinalActivation::Identity => 0,
            FinalActivation::Tanh => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FinalActivation::Identity),
            1 => Some(FinalActivation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub patch_dims: [usize; 3],
    pub final_activation: FinalActivation,
    /// Start from a zero output projection so the untrained model predicts
    /// no change.
    pub zero_init_final: bool,
    pub init_seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 8,
            in_channels: 5,
            out_channels: 1,
            patch_dims: [32, 32, 16],
            final_activation: FinalActivation::Identity,
            zero_init_final: true,
            init_seed: 7,
        }
    }
}

impl UNetConfig {
    /// Width-64 variant approximating the full-size network.
    pub fn paper_shape() -> Self {
        Self { base_channels: 64, ..Self::default() }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * voxels(self.patch_dims)
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * voxels(self.patch_dims)
    }
}

/// Layer table and per-level extents.
#[derive(Debug, Clone, PartialEq)]
struct Plan {
    dims: Vec<[usize; 3]>,
    factors: Vec<[usize; 3]>,
    enc: Vec<[Conv; 2]>,
    bottom: [Conv; 2],
    /// `ups[l]` lifts level `l + 1` to level `l`.
    ups: Vec<UpConv>,
    dec: Vec<[Conv; 2]>,
    head: Conv,
    n_params: usize,
}

fn pool_factors(d: [usize; 3], level: usize) -> Result<[usize; 3], UnetError> {
    let mut f = [1; 3];
    for (a, &axis) in AXES.iter().enumerate() {
        match d[a] {
            1 => {}
            s if s % 2 == 0 => f[a] = 2,
            s => return Err(UnetError::Indivisible { axis, size: s, level }),
        }
    }
    Ok(f)
}

impl Plan {
    fn new(cfg: &UNetConfig) -> Result<Self, UnetError> {
        if cfg.levels == 0 || cfg.base_channels == 0 || cfg.in_channels == 0 || cfg.out_channels == 0 {
            return Err(UnetError::InvalidConfig(format!(
                "levels, base_channels, in_channels and out_channels must be positive, got {cfg:?}"
            )));
        }
        if cfg.levels > 12 {
            return Err(UnetError::InvalidConfig(format!("{} levels is too deep", cfg.levels)));
        }
        if cfg.patch_dims.contains(&0) {
            return Err(UnetError::InvalidConfig(format!("empty patch dims {:?}", cfg.patch_dims)));
        }
        let mut offset = 0;
        let mut conv = |cin, cout, k| {
            let c = Conv { cin, cout, k, offset };
            offset += c.param_count();
            c
        };
        let mut dims = vec![cfg.patch_dims];
        let mut factors = Vec::new();
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for l in 0..cfg.levels {
            let w = cfg.width(l);
            enc.push([conv(cin, w, 3), conv(w, w, 3)]);
            cin = w;
            let f = pool_factors(dims[l], l)?;
            factors.push(f);
            dims.push(ops::pooled_dims(dims[l], f));
        }
        let wb = cfg.width(cfg.levels);
        let bottom = [conv(cin, wb, 3), conv(wb, wb, 3)];
        let mut dec = Vec::new();
        for l in 0..cfg.levels {
            let w = cfg.width(l);
            dec.push([conv(2 * w, w, 3), conv(w, w, 3)]);
        }
        let head = conv(cfg.width(0), cfg.out_channels, 1);
        let mut ups = Vec::new();
        for l in 0..cfg.levels {
            let up = UpConv { cin: cfg.width(l + 1), cout: cfg.width(l), f: factors[l], offset };
            offset += up.param_count();
            ups.push(up);
        }
        Ok(Self { dims, factors, enc, bottom, ups, dec, head, n_params: offset })
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.enc.iter().flatten().chain(&self.bottom).chain(self.dec.iter().flatten())
    }
}

/// Activations kept for the backward pass of one sample.
struct Tape<T> {
    enc: Vec<[Vec<T>; 2]>,
    pooled: Vec<Vec<T>>,
    pool_idx: Vec<Vec<u32>>,
    bottom: [Vec<T>; 2],
    /// Decoder inputs `[upsampled; skip]` per level.
    cat: Vec<Vec<T>>,
    dec: Vec<[Vec<T>; 2]>,
    out: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    cfg: UNetConfig,
    plan: Plan,
    params: Vec<T>,
}

/// Number of trainable parameters for `cfg`.
pub fn count_params(cfg: &UNetConfig) -> Result<usize, UnetError> {
    Ok(Plan::new(cfg)?.n_params)
}

impl<T: Real> UNet<T> {
    /// Build with He-normal weights drawn from `cfg.init_seed` and zero
    /// biases. Draws happen in `f64`, so `f32` and `f64` models built from
    /// the same config agree up to rounding.
    pub fn build(cfg: &UNetConfig) -> Result<Self, UnetError> {
        let plan = Plan::new(cfg)?;
        let mut params = vec![T::ZERO; plan.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut fill = |offset: usize, len: usize, fan_in: usize, params: &mut [T]| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[offset..offset + len] {
                *p = T::from_f64(normal.sample(&mut rng));
            }
        };
        for c in plan.convs() {
            fill(c.offset, c.weight_len(), c.cin * c.taps(), &mut params);
        }
        for u in &plan.ups {
            fill(u.offset, u.weight_len(), u.cin, &mut params);
        }
        if !cfg.zero_init_final {
            let h = plan.head;
            fill(h.offset, h.weight_len(), 2 * h.cin, &mut params);
        }
        Ok(Self { cfg: cfg.clone(), plan, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Extents at each resolution level, finest first.
    pub fn level_dims(&self) -> &[[usize; 3]] {
        &self.plan.dims
    }

    pub(crate) fn with_params(cfg: &UNetConfig, params: Vec<T>) -> Result<Self, UnetError> {
        let plan = Plan::new(cfg)?;
        if params.len() != plan.n_params {
            return Err(UnetError::Shape { expected: plan.n_params, got: params.len() });
        }
        Ok(Self { cfg: cfg.clone(), plan, params })
    }

    /// True when the output projection is all zeros, i.e. the model
    /// predicts exactly zero everywhere.
    pub fn predicts_zero(&self) -> bool {
        let h = &self.plan.head;
        self.params[h.offset..h.offset + h.param_count()].iter().all(|&v| v == T::ZERO)
    }

    fn forward_sample(&self, x: &[T], col: &mut Vec<T>) -> Tape<T> {
        let p = &self.params;
        let plan = &self.plan;
        let levels = self.cfg.levels;
        let mut enc = Vec::with_capacity(levels);
        let mut pooled: Vec<Vec<T>> = Vec::with_capacity(levels);
        let mut pool_idx = Vec::with_capacity(levels);
        for l in 0..levels {
            let d = plan.dims[l];
            let input = if l == 0 { x } else { &pooled[l - 1] };
            let a = plan.enc[l][0].forward(p, input, d, true, col);
            let b = plan.enc[l][1].forward(p, &a, d, true, col);
            let (y, idx) = maxpool(&b, plan.enc[l][1].cout, d, plan.factors[l]);
            enc.push([a, b]);
            pooled.push(y);
            pool_idx.push(idx);
        }
        let d = plan.dims[levels];
        let ba = plan.bottom[0].forward(p, &pooled[levels - 1], d, true, col);
        let bb = plan.bottom[1].forward(p, &ba, d, true, col);
        let bottom = [ba, bb];

        let mut cat = vec![Vec::new(); levels];
        let mut dec: Vec<[Vec<T>; 2]> = (0..levels).map(|_| [Vec::new(), Vec::new()]).collect();
        for l in (0..levels).rev() {
            let below = if l + 1 == levels { &bottom[1] } else { &dec[l + 1][1] };
            let mut c = plan.ups[l].forward(p, below, plan.dims[l + 1]);
            c.extend_from_slice(&enc[l][1]);
            let d = plan.dims[l];
            let a = plan.dec[l][0].forward(p, &c, d, true, col);
            let b = plan.dec[l][1].forward(p, &a, d, true, col);
            cat[l] = c;
            dec[l] = [a, b];
        }
        let mut out = plan.head.forward(p, &dec[0][1], plan.dims[0], false, col);
        if self.cfg.final_activation == FinalActivation::Tanh {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        Tape { enc, pooled, pool_idx, bottom, cat, dec, out }
    }

    /// Accumulate the parameter gradient for one sample into `g`, given the
    /// loss gradient `dout` with respect to the (activated) output.
    fn backward_sample(&self, x: &[T], tape: &Tape<T>, mut dout: Vec<T>, g: &mut [T], col: &mut Vec<T>) {
        let p = &self.params;
        let plan = &self.plan;
        let levels = self.cfg.levels;
        if self.cfg.final_activation == FinalActivation::Tanh {
            for (d, &y) in dout.iter_mut().zip(&tape.out) {
                *d *= T::ONE - y * y;
            }
        }
        let mut dup = plan.head.backward(p, &tape.dec[0][1], &dout, plan.dims[0], g, true, col).expect("dx");
        let mut dskip = Vec::with_capacity(levels);
        for l in 0..levels {
            let d = plan.dims[l];
            relu_backward(&mut dup, &tape.dec[l][1]);
            let mut da = plan.dec[l][1].backward(p, &tape.dec[l][0], &dup, d, g, true, col).expect("dx");
            relu_backward(&mut da, &tape.dec[l][0]);
            let mut dcat = plan.dec[l][0].backward(p, &tape.cat[l], &da, d, g, true, col).expect("dx");
            let skip = dcat.split_off(self.cfg.width(l) * voxels(d));
            dskip.push(skip);
            let below = if l + 1 == levels { &tape.bottom[1] } else { &tape.dec[l + 1][1] };
            dup = plan.ups[l].backward(p, below, &dcat, plan.dims[l + 1], g);
        }
        let d = plan.dims[levels];
        relu_backward(&mut dup, &tape.bottom[1]);
        let mut da = plan.bottom[1].backward(p, &tape.bottom[0], &dup, d, g, true, col).expect("dx");
        relu_backward(&mut da, &tape.bottom[0]);
        let mut dh = plan.bottom[0].backward(p, &tape.pooled[levels - 1], &da, d, g, true, col).expect("dx");
        for l in (0..levels).rev() {
            let d = plan.dims[l];
            let c = plan.enc[l][1].cout;
            let mut db = maxpool_backward(&dh, &tape.pool_idx[l], c, d, plan.factors[l]);
            for (a, s) in db.iter_mut().zip(&dskip[l]) {
                *a += *s;
            }
            relu_backward(&mut db, &tape.enc[l][1]);
            let mut da = plan.enc[l][1].backward(p, &tape.enc[l][0], &db, d, g, true, col).expect("dx");
            relu_backward(&mut da, &tape.enc[l][0]);
            let input = if l == 0 { x } else { &tape.pooled[l - 1] };
            if let Some(dx) = plan.enc[l][0].backward(p, input, &da, d, g, l > 0, col) {
                dh = dx;
            }
        }
    }

    fn check_batch(&self, inputs: &[T], batch: usize) -> Result<(), UnetError> {
        let expected = batch * self.cfg.input_len();
        if inputs.len() != expected {
            return Err(UnetError::Shape { expected, got: inputs.len() });
        }
        Ok(())
    }

    /// Predictions `[B, out, px, py, pz]` for inputs `[B, in, px, py, pz]`.
    pub fn forward(&self, inputs: &[T], batch: usize) -> Result<Vec<T>, UnetError> {
        self.check_batch(inputs, batch)?;
        if batch == 0 {
            return Ok(Vec::new());
        }
        let outs: Vec<Vec<T>> = inputs
            .par_chunks(self.cfg.input_len())
            .map_init(Vec::new, |col, x| self.forward_sample(x, col).out)
            .collect();
        Ok(outs.concat())
    }

    /// Mean squared error over every output value and its gradient.
    pub fn loss_and_grad(&self, inputs: &[T], targets: &[T], batch: usize) -> Result<(f64, Vec<T>), UnetError> {
        self.check_batch(inputs, batch)?;
        let out_len = self.cfg.output_len();
        if targets.len() != batch * out_len {
            return Err(UnetError::Shape { expected: batch * out_len, got: targets.len() });
        }
        if batch == 0 {
            return Ok((0.0, vec![T::ZERO; self.params.len()]));
        }
        let in_len = self.cfg.input_len();
        let scale = T::from_f64(2.0 / (batch * out_len) as f64);
        let partials: Vec<(f64, Vec<T>)> = (0..batch.div_ceil(GRAD_GROUP))
            .into_par_iter()
            .map(|grp| {
                let mut g = vec![T::ZERO; self.params.len()];
                let mut col = Vec::new();
                let mut sse = 0.0;
                for s in grp * GRAD_GROUP..((grp + 1) * GRAD_GROUP).min(batch) {
                    let x = &inputs[s * in_len..(s + 1) * in_len];
                    let t = &targets[s * out_len..(s + 1) * out_len];
                    let tape = self.forward_sample(x, &mut col);
                    let dout: Vec<T> = tape
                        .out
                        .iter()
                        .zip(t)
                        .map(|(&y, &t)| {
                            let r = y - t;
                            sse += r.to_f64() * r.to_f64();
                            r * scale
                        })
                        .collect();
                    self.backward_sample(x, &tape, dout, &mut g, &mut col);
                }
                (sse, g)
            })
            .collect();
        let mut total = 0.0;
        let mut grad = vec![T::ZERO; self.params.len()];
        for (sse, g) in partials {
            total += sse;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        Ok((total / (batch * out_len) as f64, grad))
    }
}
