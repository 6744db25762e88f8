use serde::{Deserialize, Serialize};

use super::{train_or_skip, train_relaxed, EpochStats, InitScheme, RelaxedTraining};
use crate::criteria::Criterion;
use crate::error::{invalid, Result};
use crate::masks::{mask_overlap, threshold_topk, BinaryMask, MaskDistribution, ParamMode, SparsityTarget, DEFAULT_BETA};
use crate::nn::{eval_01, Batch, DenseNet, SgdConfig};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PftConfig {
    pub sparsity: f64,
    pub criterion: Criterion,
    pub init_scheme: InitScheme,
    pub param_mode: ParamMode,
    pub beta: f64,
    /// Dense training before scoring; zero epochs skips it.
    pub pretrain: SgdConfig,
    pub stage2: SgdConfig,
    pub mask_lr: f64,
    pub optimize_weights: bool,
    pub masks_per_batch: usize,
    pub finetune: SgdConfig,
    /// Examples used for SNIP scores (the first rows of the training set).
    pub score_examples: usize,
    pub seed: u64,
}

impl Default for PftConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            sparsity: 0.9,
            criterion: Criterion::Magnitude,
            init_scheme: InitScheme::BlockIsotropic { epsilon: 1e-4 },
            param_mode: ParamMode::Clamp,
            beta: DEFAULT_BETA,
            pretrain: sgd,
            stage2: sgd,
            mask_lr: sgd.learning_rate,
            optimize_weights: true,
            masks_per_batch: 1,
            finetune: sgd,
            score_examples: 1024,
            seed: 0,
        }
    }
}

impl PftConfig {
    pub fn validate(&self) -> Result<()> {
        SparsityTarget::new(self.sparsity)?;
        for (name, c) in [("pretrain", &self.pretrain), ("stage2", &self.stage2), ("finetune", &self.finetune)] {
            if c.epochs > 0 {
                c.validate().map_err(|e| invalid(format!("{name}: {e}")))?;
            }
        }
        if !(self.beta > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {}", self.beta)));
        }
        if self.masks_per_batch == 0 {
            return Err(invalid("masks per batch must be positive"));
        }
        Ok(())
    }

    pub(crate) fn relaxed(&self) -> RelaxedTraining {
        RelaxedTraining {
            sgd: SgdConfig { seed: derive_seed(self.seed, 2), ..self.stage2 },
            mask_lr: self.mask_lr,
            train_weights: self.optimize_weights,
            masks_per_batch: self.masks_per_batch,
            slab_sigma: 0.0,
            train_sigma: false,
            seed: derive_seed(self.seed, 3),
        }
    }
}

/// Scoring, one-shot mask and relaxed training on top of a trained net.
#[derive(Debug, Clone)]
pub struct PftMasks {
    pub scores: Vec<f64>,
    pub osp_mask: BinaryMask,
    pub initial: MaskDistribution,
    pub distribution: MaskDistribution,
    pub hard_mask: BinaryMask,
    /// Network after relaxed training (weights change only if optimized).
    pub net: DenseNet,
    pub trace: Vec<EpochStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PftMetrics {
    pub dense_test_error: f64,
    pub osp_test_error: f64,
    pub pft_test_error: f64,
    /// Hard PFT mask on the relaxed-trained weights, before fine-tuning.
    pub pft_unfinetuned_test_error: f64,
    pub overlap: f64,
    pub keep_count: usize,
}

#[derive(Debug, Clone)]
pub struct PftOutput {
    pub dense: DenseNet,
    pub dense_trace: Vec<f64>,
    pub masks: PftMasks,
    pub osp_net: DenseNet,
    pub sparse_net: DenseNet,
    pub metrics: PftMetrics,
}

/// Scores `dense`, builds the one-shot mask, and trains the relaxed mask.
pub fn pft_masks(dense: &DenseNet, train: &Batch, cfg: &PftConfig) -> Result<PftMasks> {
    cfg.validate()?;
    if SparsityTarget::new(cfg.sparsity)?.keep_count(dense.num_weights()) == 0 {
        return Err(invalid(format!(
            "sparsity {} keeps no weights out of {}",
            cfg.sparsity,
            dense.num_weights()
        )));
    }
    let rows: Vec<usize> = (0..train.len().min(cfg.score_examples.max(1))).collect();
    let scores = cfg.criterion.scores(dense, &train.select(&rows), derive_seed(cfg.seed, 1))?;
    let osp_mask = threshold_topk(&scores, cfg.sparsity);
    let initial = cfg
        .init_scheme
        .build(&scores, cfg.sparsity)?
        .with_mode(cfg.param_mode)
        .with_beta(cfg.beta)?;
    let out = train_relaxed(dense, &initial, train, &cfg.relaxed())?;
    let hard_mask = threshold_topk(&out.dist.lambda(), cfg.sparsity);
    Ok(PftMasks {
        scores,
        osp_mask,
        initial,
        distribution: out.dist,
        hard_mask,
        net: out.net,
        trace: out.trace,
    })
}

/// Fine-tunes `net` under `mask` and zeroes the pruned weights.
pub fn finetune_masked(net: &DenseNet, mask: &BinaryMask, train: &Batch, cfg: &SgdConfig) -> Result<DenseNet> {
    let m = mask.to_f64();
    let mut out = train_or_skip(net, train, cfg, Some(&m))?.net;
    out.apply_mask_in_place(&m)?;
    Ok(out)
}

/// Pretrain, one-shot baseline, relaxed mask training, threshold and
/// fine-tune.
pub fn pft(train: &Batch, test: &Batch, net_init: &DenseNet, cfg: &PftConfig) -> Result<PftOutput> {
    cfg.validate()?;
    let pre = SgdConfig { seed: derive_seed(cfg.seed, 0), ..cfg.pretrain };
    let trained = train_or_skip(net_init, train, &pre, None)?;
    pft_from_dense(trained.net, trained.loss_trace, train, test, cfg)
}

pub fn pft_from_dense(
    dense: DenseNet,
    dense_trace: Vec<f64>,
    train: &Batch,
    test: &Batch,
    cfg: &PftConfig,
) -> Result<PftOutput> {
    let masks = pft_masks(&dense, train, cfg)?;
    let ft = SgdConfig { seed: derive_seed(cfg.seed, 4), ..cfg.finetune };
    let osp_net = finetune_masked(&dense, &masks.osp_mask, train, &ft)?;
    let sparse_net = finetune_masked(&masks.net, &masks.hard_mask, train, &ft)?;
    let metrics = PftMetrics {
        dense_test_error: eval_01(&dense, test, None)?,
        osp_test_error: eval_01(&osp_net, test, None)?,
        pft_test_error: eval_01(&sparse_net, test, None)?,
        pft_unfinetuned_test_error: eval_01(&masks.net, test, Some(&masks.hard_mask.to_f64()))?,
        overlap: mask_overlap(&masks.osp_mask, &masks.hard_mask)?,
        keep_count: masks.hard_mask.popcount(),
    };
    Ok(PftOutput {
        dense,
        dense_trace,
        masks,
        osp_net,
        sparse_net,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::pipelines::tests::toy_task;

    fn small_cfg(s: f64, criterion: Criterion) -> PftConfig {
        let sgd = SgdConfig { epochs: 3, batch_size: 32, learning_rate: 0.05, ..Default::default() };
        PftConfig {
            sparsity: s,
            criterion,
            pretrain: sgd,
            stage2: sgd,
            finetune: sgd,
            mask_lr: 0.05,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let (train, test) = (toy_task(128, 1), toy_task(64, 2));
        let net = DenseNet::init_he_uniform(&[4, 6, 2], Activation::Relu, 0).unwrap();
        let mut cfg = small_cfg(0.0, Criterion::Magnitude);
        cfg.init_scheme = InitScheme::Isotropic;
        let out = pft(&train, &test, &net, &cfg).unwrap();
        assert_eq!(out.masks.hard_mask.popcount(), net.num_weights());
        assert_eq!(out.metrics.overlap, 1.0);
    }

    #[test]
    fn popcount_invariant_across_criteria() {
        let (train, test) = (toy_task(128, 3), toy_task(64, 4));
        let net = DenseNet::init_he_uniform(&[4, 16, 2], Activation::Relu, 1).unwrap();
        let d = net.num_weights();
        for c in Criterion::ALL {
            let out = pft(&train, &test, &net, &small_cfg(0.95, c)).unwrap();
            let k = SparsityTarget::new(0.95).unwrap().keep_count(d);
            assert_eq!(out.masks.hard_mask.popcount(), k);
            assert_eq!(out.masks.osp_mask.popcount(), k);
            assert_eq!(out.metrics.keep_count, k);
            let zeros = out.sparse_net.weights().iter().filter(|w| **w == 0.0).count();
            assert!(zeros >= d - k);
        }
    }

    #[test]
    fn no_op_relaxed_training_reproduces_osp() {
        let train = toy_task(128, 5);
        let net = DenseNet::init_he_uniform(&[4, 10, 2], Activation::Relu, 2).unwrap();
        let mut cfg = small_cfg(0.6, Criterion::Magnitude);
        cfg.stage2.epochs = 0;
        let m = pft_masks(&net, &train, &cfg).unwrap();
        assert_eq!(mask_overlap(&m.osp_mask, &m.hard_mask).unwrap(), 1.0);
    }

    #[test]
    fn pft_is_deterministic() {
        let (train, test) = (toy_task(96, 6), toy_task(32, 7));
        let net = DenseNet::init_he_uniform(&[4, 6, 2], Activation::Relu, 3).unwrap();
        let cfg = small_cfg(0.5, Criterion::Snip);
        let a = pft(&train, &test, &net, &cfg).unwrap();
        let b = pft(&train, &test, &net, &cfg).unwrap();
        assert_eq!(a.sparse_net, b.sparse_net);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small_cfg(1.5, Criterion::Random);
        assert!(cfg.validate().is_err());
        cfg.sparsity = 0.5;
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
    }
}
