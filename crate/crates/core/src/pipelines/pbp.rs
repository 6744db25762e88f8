use serde::{Deserialize, Serialize};

use super::{hard_draw, relaxed_draw, train_or_skip, train_relaxed, EpochStats, InitScheme, RelaxedTraining};
use crate::bounds::{epsilon_for, kl_bernoulli, kl_gaussian, kl_spike_slab, thm1_objective, BoundReport, DeltaSplit, Sigma, SpikeSlab};
use crate::criteria::Criterion;
use crate::data::{split, AccessRecord, AuditedSplit, Dataset, SplitSpec};
use crate::error::{invalid, Error, Result};
use crate::masks::{logit, sigmoid, threshold_topk, MaskDistribution, ParamMode, SparsityTarget, DEFAULT_BETA};
use crate::nn::{ce_clamp_ceiling, epoch_batches, error_rate_effective, Batch, DenseNet, LossKind, Momentum, SgdConfig};
use crate::rng::{derive_seed, Purpose, StreamKey};

/// `points` values of `sigma^2 = e^t` with `t` evenly spaced in `[lo, hi]`.
pub fn sigma2_log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo.exp()],
        _ => (0..points)
            .map(|k| (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp())
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbpConfig {
    pub alpha: f64,
    pub sparsity: f64,
    pub criterion: Criterion,
    pub init_scheme: InitScheme,
    pub beta: f64,
    pub pretrain: SgdConfig,
    pub stage2: SgdConfig,
    pub stage2_mask_lr: f64,
    /// Candidate slab variances; the bound pays `ln(len)` for the choice.
    pub sigma2_grid: Vec<f64>,
    pub train_prior_sigma: bool,
    pub stage3: SgdConfig,
    pub stage3_mask_lr: f64,
    pub train_posterior_lambda: bool,
    pub train_posterior_sigma: bool,
    /// Multiplies the KL inside the training objective only; the reported
    /// certificate always uses the full KL.
    pub kl_downweight: f64,
    pub delta: DeltaSplit,
    /// Prior keep probabilities are clipped into `[floor, 1 - floor]`.
    pub lambda_floor: f64,
    pub mc_samples: usize,
    /// Monte Carlo draws used to rank the grid candidates.
    pub select_samples: usize,
    pub test_samples: usize,
    pub score_examples: usize,
    pub seed: u64,
}

impl Default for PbpConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            alpha: 0.6,
            sparsity: 0.9,
            criterion: Criterion::Magnitude,
            init_scheme: InitScheme::BlockIsotropic { epsilon: 1e-4 },
            beta: DEFAULT_BETA,
            pretrain: sgd,
            stage2: sgd,
            stage2_mask_lr: sgd.learning_rate,
            sigma2_grid: sigma2_log_grid(-15.0, -3.0, 7),
            train_prior_sigma: false,
            stage3: sgd,
            stage3_mask_lr: sgd.learning_rate,
            train_posterior_lambda: true,
            train_posterior_sigma: false,
            kl_downweight: 1.0,
            delta: DeltaSplit::default(),
            lambda_floor: 1e-4,
            mc_samples: 1000,
            select_samples: 20,
            test_samples: 20,
            score_examples: 1024,
            seed: 0,
        }
    }
}

impl PbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        SparsityTarget::new(self.sparsity)?;
        for (name, c) in [("pretrain", &self.pretrain), ("stage2", &self.stage2), ("stage3", &self.stage3)] {
            if c.epochs > 0 {
                c.validate().map_err(|e| invalid(format!("{name}: {e}")))?;
            }
        }
        if self.sigma2_grid.is_empty() || self.sigma2_grid.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid("sigma^2 grid must be non-empty and positive"));
        }
        if !(self.delta.bound > 0.0 && self.delta.mc > 0.0 && self.delta.total() < 1.0) {
            return Err(invalid(format!("invalid delta split {:?}", self.delta)));
        }
        if !(self.lambda_floor > 0.0 && self.lambda_floor < 0.5) {
            return Err(invalid(format!("lambda floor must lie in (0, 0.5), got {}", self.lambda_floor)));
        }
        if !(self.kl_downweight > 0.0 && self.kl_downweight.is_finite()) {
            return Err(invalid(format!("KL down-weighting must be positive, got {}", self.kl_downweight)));
        }
        if self.mc_samples == 0 || self.select_samples == 0 {
            return Err(invalid("Monte Carlo sample counts must be positive"));
        }
        if !(self.beta > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Per-epoch trace of the posterior optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage3Stats {
    pub epoch: usize,
    pub objective: f64,
    /// Mean normalized clamped cross-entropy of the relaxed samples.
    pub surrogate: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub sigma2: f64,
    /// Prior slab standard deviation after Stage 2.
    pub prior_sigma: f64,
    pub kl: f64,
    pub selection_bound: f64,
    pub stage2_trace: Vec<EpochStats>,
    pub stage3_trace: Vec<Stage3Stats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PbpMetrics {
    pub posterior_gibbs_test_error: Option<f64>,
    pub prior_gibbs_test_error: Option<f64>,
    pub posterior_expected_sparsity: f64,
}

#[derive(Debug, Clone)]
pub struct PbpOutput {
    pub split: SplitSpec,
    pub dense: DenseNet,
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
    /// Architecture and (frozen) biases shared by prior and posterior;
    /// weights hold the prior means.
    pub net: DenseNet,
    pub prior: SpikeSlab,
    pub posterior: SpikeSlab,
    pub report: BoundReport,
    pub metrics: PbpMetrics,
    pub access_log: Vec<AccessRecord>,
    pub audit_clean: bool,
}

/// Draws `samples` predictors from `q` and returns each one's 0-1 error on
/// `data`. Draw `k` uses stream step `k` of `(seed, MonteCarlo)`.
pub fn gibbs_01_samples(net: &DenseNet, q: &SpikeSlab, data: &Batch, samples: usize, seed: u64) -> Result<Vec<f64>> {
    if q.len() != net.num_weights() {
        return Err(Error::Shape(format!("distribution has {} weights, network {}", q.len(), net.num_weights())));
    }
    let sigma = match &q.sigma {
        Sigma::Scalar(s) => *s,
        Sigma::PerWeight(_) => return Err(invalid("Monte Carlo evaluation expects a scalar slab sigma")),
    };
    (0..samples as u64)
        .map(|k| {
            let eff = hard_draw(&q.lambda, &q.mean, sigma, StreamKey::new(seed, Purpose::MonteCarlo).at_step(k));
            error_rate_effective(net, data, &eff)
        })
        .collect()
}

/// Seed of the final Monte Carlo certificate of a run seeded with `seed`.
pub fn certificate_seed(seed: u64) -> u64 {
    derive_seed(seed, 100)
}

/// Certificate for `posterior` against `prior` from `mc_samples` draws
/// on the held-out split.
#[allow(clippy::too_many_arguments)]
pub fn certify(
    net: &DenseNet,
    prior: &SpikeSlab,
    posterior: &SpikeSlab,
    held_out: &Batch,
    n_total: usize,
    delta: DeltaSplit,
    grid_size: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<BoundReport> {
    let kl = kl_spike_slab(posterior, prior)?.total;
    let losses = gibbs_01_samples(net, posterior, held_out, mc_samples, seed)?;
    BoundReport::from_samples(&losses, kl, n_total, held_out.len(), delta, grid_size)
}

struct PriorState {
    net: DenseNet,
    lambda: Vec<f64>,
    sigma: f64,
    trace: Vec<EpochStats>,
}

struct PosteriorState {
    raw: Vec<f64>,
    /// Prior keep probabilities and their logits; untouched coordinates map
    /// back to the prior value exactly.
    raw0: Vec<f64>,
    lambda0: Vec<f64>,
    mean: Vec<f64>,
    sigma: f64,
    trace: Vec<Stage3Stats>,
}

impl PosteriorState {
    fn lambda(&self, i: usize) -> f64 {
        if self.raw[i] == self.raw0[i] {
            self.lambda0[i]
        } else {
            sigmoid(self.raw[i])
        }
    }

    fn spike_slab(&self) -> Result<SpikeSlab> {
        SpikeSlab::new((0..self.raw.len()).map(|i| self.lambda(i)).collect(), self.mean.clone(), Sigma::Scalar(self.sigma))
    }
}

fn prior_spike_slab(p: &PriorState) -> Result<SpikeSlab> {
    SpikeSlab::new(p.lambda.clone(), p.net.weights().to_vec(), Sigma::Scalar(p.sigma))
}

/// Total spike-and-slab KL for a sigmoid-parameterized posterior.
fn kl_total(st: &PosteriorState, prior: &PriorState) -> f64 {
    let mu0 = prior.net.weights();
    (0..st.raw.len())
        .map(|i| {
            let l = st.lambda(i);
            kl_bernoulli(l, prior.lambda[i]) + l * kl_gaussian(st.mean[i], st.sigma, mu0[i], prior.sigma)
        })
        .sum()
}

/// Minimizes the certificate objective with the normalized clamped
/// cross-entropy as the empirical term. The quadratic mean penalty is
/// applied as a proximal step so tiny prior variances stay stable.
fn stage3(prior: &PriorState, held: &Batch, cfg: &PbpConfig, seed: u64) -> Result<PosteriorState> {
    let d = prior.lambda.len();
    let raw0: Vec<f64> = prior.lambda.iter().map(|&l| logit(l)).collect();
    let mu0 = prior.net.weights().to_vec();
    let mut st = PosteriorState {
        raw: raw0.clone(),
        raw0: raw0.clone(),
        lambda0: prior.lambda.clone(),
        mean: mu0.clone(),
        sigma: prior.sigma,
        trace: Vec::new(),
    };
    let n = held.len() as f64;
    let grid_ln = (cfg.sigma2_grid.len() as f64).ln();
    let ceiling = ce_clamp_ceiling();
    let (mut vr, mut vm, mut vs) = (Momentum::new(d), Momentum::new(d), Momentum::new(1));
    let sgd = cfg.stage3;
    let mut step = 0u64;
    for epoch in 0..sgd.epochs {
        let batches = epoch_batches(held.len(), sgd.batch_size, derive_seed(seed, 1), epoch);
        let (mut obj_sum, mut emp_sum) = (0.0, 0.0);
        for rows in &batches {
            let mb = held.select(rows);
            let key = StreamKey::new(seed, Purpose::Mask).at_step(step);
            step += 1;
            let draw = relaxed_draw(&st.raw, ParamMode::Sigmoid, cfg.beta, true, key);
            let slab: Vec<f64> = st.mean.iter().zip(&draw.zeta).map(|(m, z)| m + st.sigma * z).collect();
            let eff: Vec<f64> = slab.iter().zip(&draw.x).map(|(s, x)| s * x).collect();
            let g = prior
                .net
                .backward_effective(&mb, &eff, LossKind::CrossEntropyClamped)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::Diverged { epoch },
                    other => other,
                })?;
            let emp = g.loss / ceiling;
            let kl = kl_total(&st, prior);
            let eps = epsilon_for(cfg.kl_downweight * kl + grid_ln, n, cfg.delta.bound)?;
            let (obj, d_emp, d_eps) = thm1_objective(emp, eps);
            let c = d_eps * cfg.kl_downweight / n;
            let var0 = prior.sigma * prior.sigma;

            let mut gm = vec![0.0; d];
            let mut gr = vec![0.0; d];
            let mut gs = 0.0;
            for i in 0..d {
                let ge = d_emp * g.weights[i] / ceiling;
                gm[i] = ge * draw.x[i];
                let l = sigmoid(st.raw[i]);
                let gamma = kl_gaussian(st.mean[i], st.sigma, mu0[i], prior.sigma);
                gr[i] = ge * slab[i] * draw.dx[i] + c * l * (1.0 - l) * (st.raw[i] - raw0[i] + gamma);
                if cfg.train_posterior_sigma {
                    gs += ge * draw.x[i] * draw.zeta[i] * st.sigma + c * l * (st.sigma * st.sigma / var0 - 1.0);
                }
            }
            vm.step(&mut st.mean, &gm, sgd.learning_rate, sgd.momentum);
            for i in 0..d {
                let k = sgd.learning_rate * c * sigmoid(st.raw[i]) / var0;
                st.mean[i] = (st.mean[i] + k * mu0[i]) / (1.0 + k);
            }
            if cfg.train_posterior_lambda && cfg.stage3_mask_lr > 0.0 {
                vr.step(&mut st.raw, &gr, cfg.stage3_mask_lr, sgd.momentum);
            }
            if cfg.train_posterior_sigma {
                let mut ls = [st.sigma.ln()];
                vs.step(&mut ls, &[gs], sgd.learning_rate, sgd.momentum);
                st.sigma = ls[0].exp();
            }
            obj_sum += obj;
            emp_sum += emp;
        }
        let k = batches.len() as f64;
        let kl = kl_total(&st, prior);
        if !(obj_sum.is_finite() && kl.is_finite()) || st.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        st.trace.push(Stage3Stats {
            epoch,
            objective: obj_sum / k,
            surrogate: emp_sum / k,
            kl,
        });
    }
    Ok(st)
}

/// Three-stage self-bounded pruning on `data` (the full training set `S`).
/// `test`, when given, is used for reporting only.
pub fn pbp(data: &Dataset, test: Option<&Dataset>, net_init: &DenseNet, cfg: &PbpConfig) -> Result<PbpOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = net_init.num_weights();
    if SparsityTarget::new(cfg.sparsity)?.keep_count(d) == 0 {
        return Err(invalid(format!("sparsity {} keeps no weights out of {d}", cfg.sparsity)));
    }
    let spec = split(data.len(), cfg.alpha, derive_seed(cfg.seed, 10))?;
    if spec.prior.is_empty() || spec.held_out.is_empty() {
        return Err(invalid(format!("alpha {} leaves an empty split of {} examples", cfg.alpha, data.len())));
    }
    let n_total = data.len();
    let mut audited = AuditedSplit::new(data, spec.clone())?;

    // Stages 1 and 2 see S_P only.
    let s_p = audited.prior().to_batch();
    let pre = SgdConfig { seed: derive_seed(cfg.seed, 11), ..cfg.pretrain };
    let dense = train_or_skip(net_init, &s_p, &pre, None)?.net;
    let rows: Vec<usize> = (0..s_p.len().min(cfg.score_examples.max(1))).collect();
    let scores = cfg.criterion.scores(&dense, &s_p.select(&rows), derive_seed(cfg.seed, 12))?;
    let init = cfg
        .init_scheme
        .build(&scores, cfg.sparsity)?
        .with_mode(ParamMode::Sigmoid)
        .with_beta(cfg.beta)?;
    let mut priors = Vec::with_capacity(cfg.sigma2_grid.len());
    for (g, &s2) in cfg.sigma2_grid.iter().enumerate() {
        let opts = RelaxedTraining {
            sgd: SgdConfig { seed: derive_seed(cfg.seed, 20 + g as u64), ..cfg.stage2 },
            mask_lr: cfg.stage2_mask_lr,
            train_weights: true,
            masks_per_batch: 1,
            slab_sigma: s2.sqrt(),
            train_sigma: cfg.train_prior_sigma,
            seed: derive_seed(cfg.seed, 40 + g as u64),
        };
        let out = train_relaxed(&dense, &init, &s_p, &opts)?;
        let lambda: Vec<f64> = out
            .dist
            .lambda()
            .iter()
            .map(|l| l.clamp(cfg.lambda_floor, 1.0 - cfg.lambda_floor))
            .collect();
        priors.push(PriorState {
            net: out.net,
            lambda,
            sigma: out.slab_sigma,
            trace: out.trace,
        });
    }

    // Stage 3 and the certificate use S \ S_P.
    audited.enter_posterior_stage();
    let held = audited.held_out()?.to_batch();
    let grid_size = cfg.sigma2_grid.len();
    let mut candidates = Vec::with_capacity(grid_size);
    let mut best: Option<(usize, f64, PosteriorState)> = None;
    for (g, prior) in priors.iter().enumerate() {
        let post = stage3(prior, &held, cfg, derive_seed(cfg.seed, 60 + g as u64))?;
        let q = post.spike_slab()?;
        let p = prior_spike_slab(prior)?;
        let sel = certify(&prior.net, &p, &q, &held, n_total, cfg.delta, grid_size, cfg.select_samples, derive_seed(cfg.seed, 80 + g as u64))?;
        candidates.push(Candidate {
            sigma2: cfg.sigma2_grid[g],
            prior_sigma: prior.sigma,
            kl: sel.kl_total,
            selection_bound: sel.bound,
            stage2_trace: prior.trace.clone(),
            stage3_trace: post.trace.clone(),
        });
        if best.as_ref().map_or(true, |(_, b, _)| sel.bound < *b) {
            best = Some((g, sel.bound, post));
        }
    }
    let (chosen, _, post) = best.expect("grid is non-empty");
    let prior_state = &priors[chosen];
    let prior = prior_spike_slab(prior_state)?;
    let posterior = post.spike_slab()?;
    let report = certify(
        &prior_state.net,
        &prior,
        &posterior,
        &held,
        n_total,
        cfg.delta,
        grid_size,
        cfg.mc_samples,
        certificate_seed(cfg.seed),
    )?;
    let metrics = match test {
        Some(t) if cfg.test_samples > 0 => {
            let tb = t.to_batch();
            let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
            PbpMetrics {
                posterior_gibbs_test_error: Some(mean(gibbs_01_samples(&prior_state.net, &posterior, &tb, cfg.test_samples, derive_seed(cfg.seed, 101))?)),
                prior_gibbs_test_error: Some(mean(gibbs_01_samples(&prior_state.net, &prior, &tb, cfg.test_samples, derive_seed(cfg.seed, 102))?)),
                posterior_expected_sparsity: expected_sparsity(&posterior),
            }
        }
        _ => PbpMetrics {
            posterior_gibbs_test_error: None,
            prior_gibbs_test_error: None,
            posterior_expected_sparsity: expected_sparsity(&posterior),
        },
    };
    Ok(PbpOutput {
        split: spec,
        dense,
        candidates,
        chosen,
        net: prior_state.net.clone(),
        prior,
        posterior,
        report,
        metrics,
        audit_clean: audited.audit_clean(),
        access_log: audited.log().to_vec(),
    })
}

fn expected_sparsity(q: &SpikeSlab) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    q.lambda.iter().map(|l| 1.0 - l).sum::<f64>() / q.len() as f64
}

/// The deterministic sparse network given by the top keep probabilities of
/// `q` and its slab means.
pub fn posterior_mode_net(net: &DenseNet, q: &SpikeSlab, sparsity: f64) -> Result<DenseNet> {
    let mask = threshold_topk(&q.lambda, sparsity);
    let mut out = net.clone();
    out.weights_mut().copy_from_slice(&q.mean);
    out.apply_mask_in_place(&mask.to_f64())?;
    Ok(out)
}

/// Mask distribution with the posterior keep probabilities.
pub fn keep_distribution(q: &SpikeSlab, beta: f64) -> Result<MaskDistribution> {
    MaskDistribution::from_lambda(&q.lambda, ParamMode::Sigmoid, beta)
}
