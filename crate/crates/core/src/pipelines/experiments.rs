//! Robustness to weight noise, mask overlap, masks at initialization and
//! mask stability under reshuffling.

use serde::{Deserialize, Serialize};

use super::{pft_masks, train_or_skip, train_relaxed, EpochStats, InitScheme, MeanCi, PftConfig, RelaxedTraining};
use crate::criteria::{score_magnitude, Criterion};
use crate::error::{invalid, Result};
use crate::masks::{mask_overlap, sample_bernoulli, threshold_topk, BinaryMask, ParamMode};
use crate::nn::{error_rate_effective, Batch, DenseNet, SgdConfig};
use crate::rng::{derive_seed, std_normal, Purpose, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub v: f64,
    pub error: f64,
    pub accuracy: f64,
    /// `(acc_0 - acc_v) / acc_0`.
    pub drop: f64,
}

/// Test error under `W_i -> W_i + v zeta_i`, averaged over `draws`
/// perturbations. Pruned weights (mask zero) stay at zero.
pub fn robustness_curve(
    net: &DenseNet,
    mask: Option<&BinaryMask>,
    data: &Batch,
    variances: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<RobustnessPoint>> {
    if draws == 0 {
        return Err(invalid("perturbation draws must be positive"));
    }
    let keep: Vec<f64> = match mask {
        Some(m) => m.to_f64(),
        None => vec![1.0; net.num_weights()],
    };
    let base = net.effective_weights(Some(&keep))?;
    let err0 = error_rate_effective(net, data, &base)?;
    let acc0 = 1.0 - err0;
    variances
        .iter()
        .enumerate()
        .map(|(vi, &v)| {
            let mut total = 0.0;
            for r in 0..draws as u64 {
                if v == 0.0 {
                    total += err0;
                    continue;
                }
                let key = StreamKey::new(derive_seed(seed, vi as u64), Purpose::Perturb).at_step(r);
                let mut u = key.weights_from(0);
                let eff: Vec<f64> = base
                    .iter()
                    .zip(&keep)
                    .map(|(&w, &k)| {
                        let d = u.next_weight();
                        if k == 0.0 {
                            0.0
                        } else {
                            w + v * std_normal(d[0], d[1])
                        }
                    })
                    .collect();
                total += error_rate_effective(net, data, &eff)?;
            }
            let error = total / draws as f64;
            let accuracy = 1.0 - error;
            Ok(RobustnessPoint {
                v,
                error,
                accuracy,
                drop: if acc0 > 0.0 { (acc0 - accuracy) / acc0 } else { 0.0 },
            })
        })
        .collect()
}

/// Grid indices where the dense drop lies in `[lo, hi]`.
pub fn mid_range(dense: &[RobustnessPoint], lo: f64, hi: f64) -> Vec<usize> {
    dense
        .iter()
        .enumerate()
        .filter(|(_, p)| p.drop >= lo && p.drop <= hi)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub criterion: Criterion,
    pub sparsity: f64,
    pub seed: u64,
    pub overlap: f64,
}

/// One-shot vs relaxed-trained mask overlap for each criterion and
/// sparsity, on each `(seed, trained dense net)` pair.
pub fn overlap_vs_sparsity(
    nets: &[(u64, DenseNet)],
    train: &Batch,
    base: &PftConfig,
    criteria: &[Criterion],
    sparsities: &[f64],
) -> Result<Vec<OverlapRow>> {
    let mut rows = Vec::new();
    for (seed, net) in nets {
        for &criterion in criteria {
            for &sparsity in sparsities {
                let cfg = PftConfig {
                    criterion,
                    sparsity,
                    seed: *seed,
                    ..base.clone()
                };
                let m = pft_masks(net, train, &cfg)?;
                rows.push(OverlapRow {
                    criterion,
                    sparsity,
                    seed: *seed,
                    overlap: mask_overlap(&m.osp_mask, &m.hard_mask)?,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub criterion: Criterion,
    pub sparsity: f64,
    pub overlap: MeanCi,
}

pub fn summarize_overlap(rows: &[OverlapRow]) -> Vec<OverlapSummary> {
    let mut keys: Vec<(Criterion, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(c, s)| *c == r.criterion && *s == r.sparsity) {
            keys.push((r.criterion, r.sparsity));
        }
    }
    keys.into_iter()
        .map(|(criterion, sparsity)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.criterion == criterion && r.sparsity == sparsity)
                .map(|r| r.overlap)
                .collect();
            OverlapSummary {
                criterion,
                sparsity,
                overlap: MeanCi::of(&v),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongLthConfig {
    pub sparsity: f64,
    pub criterion: Criterion,
    pub init_scheme: InitScheme,
    pub param_mode: ParamMode,
    pub beta: f64,
    pub epochs: usize,
    pub mask_lr: f64,
    pub batch_size: usize,
    /// Hard masks drawn from each distribution for evaluation.
    pub samples: usize,
    pub seed: u64,
}

impl Default for StrongLthConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.5,
            criterion: Criterion::Random,
            init_scheme: InitScheme::Isotropic,
            param_mode: ParamMode::Clamp,
            beta: crate::masks::DEFAULT_BETA,
            epochs: 100,
            mask_lr: 0.5,
            batch_size: 128,
            samples: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongLthOutput {
    pub untrained_errors: Vec<f64>,
    pub trained_errors: Vec<f64>,
    pub untrained: MeanCi,
    pub trained: MeanCi,
    pub trace: Vec<EpochStats>,
}

/// Trains keep probabilities on frozen weights at initialization and
/// compares hard masks drawn before and after.
pub fn strong_lth(train: &Batch, test: &Batch, net: &DenseNet, cfg: &StrongLthConfig) -> Result<StrongLthOutput> {
    if cfg.samples == 0 {
        return Err(invalid("mask samples must be positive"));
    }
    let rows: Vec<usize> = (0..train.len().min(1024)).collect();
    let scores = cfg.criterion.scores(net, &train.select(&rows), derive_seed(cfg.seed, 1))?;
    let init = cfg
        .init_scheme
        .build(&scores, cfg.sparsity)?
        .with_mode(cfg.param_mode)
        .with_beta(cfg.beta)?;
    let opts = RelaxedTraining {
        sgd: SgdConfig {
            learning_rate: cfg.mask_lr,
            momentum: 0.9,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            seed: derive_seed(cfg.seed, 2),
        },
        mask_lr: cfg.mask_lr,
        train_weights: false,
        masks_per_batch: 1,
        slab_sigma: 0.0,
        train_sigma: false,
        seed: derive_seed(cfg.seed, 3),
    };
    let out = train_relaxed(net, &init, train, &opts)?;
    let errors = |dist: &crate::masks::MaskDistribution, tag: u64| -> Result<Vec<f64>> {
        (0..cfg.samples as u64)
            .map(|k| {
                let key = StreamKey::new(derive_seed(cfg.seed, tag), Purpose::MonteCarlo).at_step(k);
                let mask = sample_bernoulli(dist, key).to_f64();
                crate::nn::eval_01(net, test, Some(&mask))
            })
            .collect()
    };
    let untrained_errors = errors(&init, 4)?;
    let trained_errors = errors(&out.dist, 5)?;
    Ok(StrongLthOutput {
        untrained: MeanCi::of(&untrained_errors),
        trained: MeanCi::of(&trained_errors),
        untrained_errors,
        trained_errors,
        trace: out.trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub index: usize,
    pub frequency: f64,
    pub mean_abs: f64,
    pub std_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStability {
    /// Fraction of runs in which each weight survived magnitude pruning.
    pub frequency: Vec<f64>,
    /// Weights kept in some but not all runs.
    pub boundary: Vec<StabilityRow>,
    pub boundary_fraction: f64,
}

/// Retrains from the same initialization with `shuffle_seeds` and compares
/// the magnitude masks at `sparsity`.
pub fn mask_stability(
    train: &Batch,
    net_init: &DenseNet,
    sgd: &SgdConfig,
    sparsity: f64,
    shuffle_seeds: &[u64],
) -> Result<MaskStability> {
    if shuffle_seeds.is_empty() {
        return Err(invalid("need at least one run"));
    }
    let d = net_init.num_weights();
    let mut counts = vec![0usize; d];
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for &seed in shuffle_seeds {
        let net = train_or_skip(net_init, train, &SgdConfig { seed, ..*sgd }, None)?.net;
        let mask = threshold_topk(&score_magnitude(&net), sparsity);
        for (i, (&kept, &w)) in mask.bits().iter().zip(net.weights()).enumerate() {
            counts[i] += kept as usize;
            sum[i] += w.abs();
            sum_sq[i] += w * w;
        }
    }
    let runs = shuffle_seeds.len() as f64;
    let frequency: Vec<f64> = counts.iter().map(|&c| c as f64 / runs).collect();
    let boundary: Vec<StabilityRow> = (0..d)
        .filter(|&i| counts[i] > 0 && counts[i] < shuffle_seeds.len())
        .map(|i| {
            let mean_abs = sum[i] / runs;
            StabilityRow {
                index: i,
                frequency: frequency[i],
                mean_abs,
                std_abs: (sum_sq[i] / runs - mean_abs * mean_abs).max(0.0).sqrt(),
            }
        })
        .collect();
    Ok(MaskStability {
        boundary_fraction: boundary.len() as f64 / d.max(1) as f64,
        frequency,
        boundary,
    })
}

/// Histogram of keep probabilities over `bins` equal-width bins of `[0, 1]`.
pub fn probability_histogram(lambda: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for &l in lambda {
        let b = ((l.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (b as f64 / bins as f64, (b + 1) as f64 / bins as f64, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::pipelines::tests::toy_task;

    fn trained_net(seed: u64) -> (DenseNet, Batch) {
        let data = toy_task(200, seed);
        let net = DenseNet::init_he_uniform(&[4, 16, 2], Activation::Relu, seed).unwrap();
        let sgd = SgdConfig { epochs: 5, batch_size: 32, learning_rate: 0.05, seed, momentum: 0.9 };
        (train_or_skip(&net, &data, &sgd, None).unwrap().net, data)
    }

    #[test]
    fn robustness_limits() {
        let (net, data) = trained_net(1);
        let pts = robustness_curve(&net, None, &data, &[0.0, 1e3], 5, 2).unwrap();
        assert_eq!(pts[0].drop, 0.0);
        // Huge noise: about chance on two balanced classes.
        assert!((pts[1].error - 0.5).abs() < 0.2, "{:?}", pts[1]);
    }

    #[test]
    fn robustness_keeps_pruned_weights_at_zero() {
        let (net, data) = trained_net(2);
        let mask = BinaryMask::new(vec![false; net.num_weights()]);
        let pts = robustness_curve(&net, Some(&mask), &data, &[0.0, 10.0], 3, 0).unwrap();
        // Every weight pruned: noise has nothing to act on.
        assert_eq!(pts[0].error, pts[1].error);
    }

    #[test]
    fn overlap_near_one_for_tiny_sparsity() {
        let (net, data) = trained_net(3);
        let sgd = SgdConfig { epochs: 2, batch_size: 32, learning_rate: 0.05, ..Default::default() };
        let base = PftConfig { stage2: sgd, mask_lr: 0.05, ..Default::default() };
        let rows = overlap_vs_sparsity(&[(1, net)], &data, &base, &[Criterion::Magnitude], &[0.01, 0.9]).unwrap();
        assert!(rows[0].overlap > 0.95);
        let s = summarize_overlap(&rows);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn single_run_frequencies_are_binary() {
        let data = toy_task(100, 4);
        let net = DenseNet::init_he_uniform(&[4, 8, 2], Activation::Relu, 4).unwrap();
        let sgd = SgdConfig { epochs: 2, batch_size: 16, learning_rate: 0.05, ..Default::default() };
        let one = mask_stability(&data, &net, &sgd, 0.5, &[7]).unwrap();
        assert!(one.frequency.iter().all(|f| *f == 0.0 || *f == 1.0));
        assert!(one.boundary.is_empty());
        let same = mask_stability(&data, &net, &sgd, 0.5, &[7, 7, 7]).unwrap();
        assert_eq!(same.frequency, one.frequency);
    }

    #[test]
    fn strong_lth_runs() {
        let (train, test) = (toy_task(200, 5), toy_task(100, 6));
        let net = DenseNet::init_he_uniform(&[4, 16, 2], Activation::Relu, 5).unwrap();
        let cfg = StrongLthConfig { epochs: 5, batch_size: 32, samples: 4, ..Default::default() };
        let out = strong_lth(&train, &test, &net, &cfg).unwrap();
        assert_eq!(out.trained_errors.len(), 4);
        assert_eq!(out.trace.len(), 5);
    }

    #[test]
    fn histogram_counts() {
        let h = probability_histogram(&[0.0, 0.05, 0.5, 1.0], 10);
        assert_eq!(h.len(), 10);
        assert_eq!(h[0].2, 2);
        assert_eq!(h[5].2, 1);
        assert_eq!(h[9].2, 1);
    }
}
