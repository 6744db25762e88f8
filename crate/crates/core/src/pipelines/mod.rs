//! End-to-end procedures: probabilistic fine-tuning, PAC-Bayes pruning,
//! gradient oracles for the relaxed masks and the auxiliary experiments.

mod experiments;
mod linear_suite;
mod oracle;
mod pbp;
mod pft;
mod record;

pub use experiments::*;
pub use linear_suite::*;
pub use oracle::*;
pub use pbp::*;
pub use pft::*;
pub use record::*;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::masks::{concrete_value, mask_entropy, MaskDistribution, ParamMode};
use crate::nn::{epoch_batches, Batch, DenseNet, LossKind, Momentum, SgdConfig, Trained};
use crate::rng::{std_normal, Purpose, StreamKey};

/// How the keep probabilities are initialized before relaxed training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    Isotropic,
    BlockIsotropic { epsilon: f64 },
}

impl InitScheme {
    pub fn build(&self, scores: &[f64], sparsity: f64) -> Result<MaskDistribution> {
        match *self {
            InitScheme::Isotropic => crate::masks::init_isotropic(scores.len(), sparsity),
            InitScheme::BlockIsotropic { epsilon } => crate::masks::init_block_isotropic(scores, sparsity, epsilon),
        }
    }
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    /// `isotropic`, `block_isotropic` (epsilon 1e-4) or `block_isotropic:EPS`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        match s.split_once(':') {
            None if s == "isotropic" => Ok(Self::Isotropic),
            None if s == "block_isotropic" => Ok(Self::BlockIsotropic { epsilon: 1e-4 }),
            Some(("block_isotropic", eps)) => {
                let epsilon = eps
                    .parse()
                    .map_err(|_| invalid(format!("bad epsilon {eps:?} in init scheme")))?;
                Ok(Self::BlockIsotropic { epsilon })
            }
            _ => Err(invalid(format!("unknown init scheme {s:?}"))),
        }
    }
}

/// Per-epoch summary of relaxed-mask training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Mean per-weight mask entropy in bits.
    pub entropy: f64,
    pub expected_sparsity: f64,
}

/// Settings for training keep probabilities through concrete samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxedTraining {
    /// Weight learning rate, momentum, batch size, epochs and shuffle seed.
    pub sgd: SgdConfig,
    pub mask_lr: f64,
    pub train_weights: bool,
    pub masks_per_batch: usize,
    /// Standard deviation of Gaussian slab noise added to the weights.
    pub slab_sigma: f64,
    pub train_sigma: bool,
    /// Seed of the mask and noise streams.
    pub seed: u64,
}

impl RelaxedTraining {
    pub fn validate(&self) -> Result<()> {
        if self.sgd.epochs > 0 {
            self.sgd.validate()?;
        }
        if !(self.mask_lr >= 0.0 && self.mask_lr.is_finite()) {
            return Err(invalid(format!("mask learning rate must be non-negative, got {}", self.mask_lr)));
        }
        if self.masks_per_batch == 0 {
            return Err(invalid("masks per batch must be positive"));
        }
        if !(self.slab_sigma >= 0.0 && self.slab_sigma.is_finite()) {
            return Err(invalid(format!("slab sigma must be non-negative, got {}", self.slab_sigma)));
        }
        if self.train_sigma && self.slab_sigma == 0.0 {
            return Err(invalid("cannot train a zero slab sigma"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RelaxedOutcome {
    pub net: DenseNet,
    pub dist: MaskDistribution,
    pub slab_sigma: f64,
    pub trace: Vec<EpochStats>,
}

/// One relaxed draw of `x * (w + sigma zeta)` for every weight.
pub(crate) struct RelaxedDraw {
    pub x: Vec<f64>,
    pub dx: Vec<f64>,
    pub zeta: Vec<f64>,
}

/// Concrete mask values from uniforms 0 and 1 of each weight's block,
/// slab noise from uniforms 2 and 3.
pub(crate) fn relaxed_draw(raw: &[f64], mode: ParamMode, beta: f64, with_noise: bool, key: StreamKey) -> RelaxedDraw {
    let mut u = key.weights_from(0);
    let n = raw.len();
    let (mut x, mut dx) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut zeta = if with_noise { Vec::with_capacity(n) } else { Vec::new() };
    for &r in raw {
        let d = u.next_weight();
        let (v, dv) = concrete_value(r, mode, beta, d[0], d[1]);
        x.push(v);
        dx.push(dv);
        if with_noise {
            zeta.push(std_normal(d[2], d[3]));
        }
    }
    RelaxedDraw { x, dx, zeta }
}

/// Hard spike-and-slab draw with the same stream layout as
/// [`relaxed_draw`]: keep if uniform 0 is below `lambda`, noise from 2 and 3.
pub(crate) fn hard_draw(lambda: &[f64], mean: &[f64], sigma: f64, key: StreamKey) -> Vec<f64> {
    let mut u = key.weights_from(0);
    lambda
        .iter()
        .zip(mean)
        .map(|(&l, &m)| {
            let d = u.next_weight();
            if d[0] < l {
                if sigma > 0.0 {
                    m + sigma * std_normal(d[2], d[3])
                } else {
                    m
                }
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn project_raw(dist: &mut MaskDistribution) {
    if dist.mode() == ParamMode::Clamp {
        for r in dist.raw_mut() {
            *r = r.clamp(0.0, 1.0);
        }
    }
}

/// Trains the keep probabilities (and optionally the weights and biases) on
/// the clamped cross-entropy of relaxed mask samples.
pub fn train_relaxed(
    net: &DenseNet,
    dist: &MaskDistribution,
    data: &Batch,
    opts: &RelaxedTraining,
) -> Result<RelaxedOutcome> {
    opts.validate()?;
    if dist.len() != net.num_weights() {
        return Err(Error::Shape(format!(
            "mask has {} entries but the network has {} weights",
            dist.len(),
            net.num_weights()
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = net.clone();
    let mut dist = dist.clone();
    let mut log_sigma = if opts.slab_sigma > 0.0 { opts.slab_sigma.ln() } else { f64::NEG_INFINITY };
    let noisy = opts.slab_sigma > 0.0;
    let d = net.num_weights();
    let (mut vw, mut vb, mut vr) = (Momentum::new(d), Momentum::new(net.num_biases()), Momentum::new(d));
    let mut vs = Momentum::new(1);
    let mut trace = Vec::with_capacity(opts.sgd.epochs);
    let mut step = 0u64;
    for epoch in 0..opts.sgd.epochs {
        let batches = epoch_batches(data.len(), opts.sgd.batch_size, opts.sgd.seed, epoch);
        let mut total = 0.0;
        for rows in &batches {
            let mb = data.select(rows);
            let sigma = log_sigma.exp();
            let mut gw = vec![0.0; d];
            let mut gr = vec![0.0; d];
            let mut gb = vec![0.0; net.num_biases()];
            let mut gs = 0.0;
            let mut loss = 0.0;
            for _ in 0..opts.masks_per_batch {
                let key = StreamKey::new(opts.seed, Purpose::Mask).at_step(step);
                step += 1;
                let draw = relaxed_draw(dist.raw(), dist.mode(), dist.beta(), noisy, key);
                let w = net.weights();
                let slab: Vec<f64> = if noisy {
                    w.iter().zip(&draw.zeta).map(|(w, z)| w + sigma * z).collect()
                } else {
                    w.to_vec()
                };
                let eff: Vec<f64> = slab.iter().zip(&draw.x).map(|(s, x)| s * x).collect();
                let g = net
                    .backward_effective(&mb, &eff, LossKind::CrossEntropyClamped)
                    .map_err(|e| diverged(e, epoch))?;
                for i in 0..d {
                    let ge = g.weights[i];
                    gw[i] += ge * draw.x[i];
                    gr[i] += ge * slab[i] * draw.dx[i];
                    if noisy {
                        gs += ge * draw.x[i] * draw.zeta[i] * sigma;
                    }
                }
                for (a, b) in gb.iter_mut().zip(&g.biases) {
                    *a += b;
                }
                loss += g.loss;
            }
            let k = opts.masks_per_batch as f64;
            let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x /= k);
            scale(&mut gw);
            scale(&mut gr);
            scale(&mut gb);
            if opts.train_weights {
                vw.step(net.weights_mut(), &gw, opts.sgd.learning_rate, opts.sgd.momentum);
                vb.step(net.biases_mut(), &gb, opts.sgd.learning_rate, opts.sgd.momentum);
            }
            if opts.mask_lr > 0.0 {
                vr.step(dist.raw_mut(), &gr, opts.mask_lr, opts.sgd.momentum);
                project_raw(&mut dist);
            }
            if opts.train_sigma {
                let mut ls = [log_sigma];
                vs.step(&mut ls, &[gs / k], opts.sgd.learning_rate, opts.sgd.momentum);
                log_sigma = ls[0];
            }
            total += loss / k;
        }
        let mean = total / batches.len() as f64;
        if !mean.is_finite() || net.weights().iter().any(|w| !w.is_finite()) || dist.raw().iter().any(|r| r.is_nan()) {
            return Err(Error::Diverged { epoch });
        }
        let lambda = dist.lambda();
        trace.push(EpochStats {
            epoch,
            loss: mean,
            entropy: mask_entropy(&lambda),
            expected_sparsity: dist.expected_sparsity(),
        });
    }
    Ok(RelaxedOutcome {
        net,
        dist,
        slab_sigma: if noisy { log_sigma.exp() } else { 0.0 },
        trace,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFiniteLoss { .. } => Error::Diverged { epoch },
        other => other,
    }
}

/// Plain training, or the network unchanged when `cfg.epochs` is zero.
pub fn train_or_skip(net: &DenseNet, data: &Batch, cfg: &SgdConfig, mask: Option<&[f64]>) -> Result<Trained> {
    if cfg.epochs == 0 {
        return Ok(Trained {
            net: net.clone(),
            loss_trace: Vec::new(),
        });
    }
    crate::nn::train(net, data, cfg, mask, LossKind::CrossEntropyClamped)
}

/// Sample mean and the half-width of a normal 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, half_width: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let half_width = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, half_width, n }
    }
}
