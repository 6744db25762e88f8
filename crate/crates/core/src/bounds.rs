//! PAC-Bayes machinery: Bernoulli KL and its inverse, spike-and-slab KL,
//! the data-dependent certificate and the Monte Carlo confidence step.
//!
//! All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Total confidence budget used unless configured otherwise.
pub const DEFAULT_DELTA: f64 = 0.05;

/// Termination width for the kl-inverse bisection.
pub const KL_INVERSE_TOL: f64 = 1e-10;

/// Bernoulli KL `kl(q || p)` with the `0 ln 0 = 0` convention.
///
/// Returns `+inf` when `p` is 0 or 1 and `q` differs from it.
pub fn kl_bernoulli(q: f64, p: f64) -> f64 {
    if q == p {
        return 0.0;
    }
    if p <= 0.0 || p >= 1.0 {
        return f64::INFINITY;
    }
    let a = if q > 0.0 { q * (q / p).ln() } else { 0.0 };
    let b = if q < 1.0 { (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln() } else { 0.0 };
    (a + b).max(0.0)
}

/// `d kl(q || p) / dq` for `q, p` in `(0, 1)`.
pub fn kl_bernoulli_dq(q: f64, p: f64) -> f64 {
    (q / p).ln() - ((1.0 - q) / (1.0 - p)).ln()
}

/// `sup { p in [0, 1] : kl(a || p) <= eps }`.
pub fn kl_inverse(a: f64, eps: f64) -> f64 {
    let a = a.clamp(0.0, 1.0);
    if eps <= 0.0 {
        return a;
    }
    if a == 0.0 {
        return -(-eps).exp_m1();
    }
    if a == 1.0 {
        return 1.0;
    }
    // sup is 1 when even the largest float below 1 is within budget
    if kl_bernoulli(a, 1.0 - f64::EPSILON / 2.0) <= eps {
        return 1.0;
    }
    let (mut lo, mut hi) = (a, 1.0);
    // run to float resolution; the tolerance is a floor, not a target
    while hi - lo > KL_INVERSE_TOL * 1e-6 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if kl_bernoulli(a, mid) > eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Slab standard deviations: one shared value or one per weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Scalar(f64),
    PerWeight(Vec<f64>),
}

impl Sigma {
    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Sigma::Scalar(s) => *s,
            Sigma::PerWeight(v) => v[i],
        }
    }
}

/// Per-weight mixture `(1 - lambda) delta_0 + lambda N(mean, sigma^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeSlab {
    pub lambda: Vec<f64>,
    pub mean: Vec<f64>,
    pub sigma: Sigma,
}

impl SpikeSlab {
    pub fn new(lambda: Vec<f64>, mean: Vec<f64>, sigma: Sigma) -> Result<Self> {
        if lambda.len() != mean.len() {
            return Err(Error::Shape(format!("{} probabilities vs {} means", lambda.len(), mean.len())));
        }
        if let Sigma::PerWeight(v) = &sigma {
            if v.len() != lambda.len() {
                return Err(Error::Shape(format!("{} sigmas vs {} weights", v.len(), lambda.len())));
            }
        }
        for (i, &l) in lambda.iter().enumerate() {
            if !(0.0..=1.0).contains(&l) {
                return Err(invalid(format!("keep probability {l} at {i} outside [0, 1]")));
            }
            let s = sigma.at(i);
            if l > 0.0 && !(s > 0.0 && s.is_finite()) {
                return Err(invalid(format!("slab sigma {s} at {i} must be positive")));
            }
        }
        Ok(Self { lambda, mean, sigma })
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

/// `KL(N(mq, sq^2) || N(mp, sp^2))`.
pub fn kl_gaussian(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let r = (sq * sq) / (sp * sp);
    0.5 * ((mq - mp).powi(2) / (sp * sp) + r - r.ln() - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSlabKl {
    pub total: f64,
    /// `kl(lambda_i || lambda0_i) + lambda_i gamma_i` per weight.
    pub per_weight: Vec<f64>,
}

/// `KL(Q || P) = sum_i kl(lambda_i || lambda0_i) + lambda_i gamma_i`.
pub fn kl_spike_slab(q: &SpikeSlab, p: &SpikeSlab) -> Result<SpikeSlabKl> {
    if q.len() != p.len() {
        return Err(Error::Shape(format!("posterior has {} weights, prior {}", q.len(), p.len())));
    }
    let mut per_weight = Vec::with_capacity(q.len());
    for i in 0..q.len() {
        let (l, l0) = (q.lambda[i], p.lambda[i]);
        let bern = kl_bernoulli(l, l0);
        if !bern.is_finite() {
            return Err(Error::InfiniteKl {
                index: i,
                posterior: l,
                prior: l0,
            });
        }
        let slab = if l > 0.0 {
            l * kl_gaussian(q.mean[i], q.sigma.at(i), p.mean[i], p.sigma.at(i))
        } else {
            0.0
        };
        per_weight.push(bern + slab);
    }
    Ok(SpikeSlabKl {
        total: per_weight.iter().sum(),
        per_weight,
    })
}

/// Gradients of `KL(Q || P)` with respect to the posterior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSlabKlGrad {
    pub lambda: Vec<f64>,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn kl_spike_slab_grad(q: &SpikeSlab, p: &SpikeSlab) -> SpikeSlabKlGrad {
    let n = q.len();
    let mut g = SpikeSlabKlGrad {
        lambda: vec![0.0; n],
        mean: vec![0.0; n],
        sigma: vec![0.0; n],
    };
    for i in 0..n {
        let (l, l0) = (q.lambda[i], p.lambda[i]);
        let (sq, sp) = (q.sigma.at(i), p.sigma.at(i));
        let gamma = kl_gaussian(q.mean[i], sq, p.mean[i], sp);
        let lc = l.clamp(1e-15, 1.0 - 1e-15);
        g.lambda[i] = kl_bernoulli_dq(lc, l0) + gamma;
        g.mean[i] = l * (q.mean[i] - p.mean[i]) / (sp * sp);
        g.sigma[i] = l * (sq / (sp * sp) - 1.0 / sq);
    }
    g
}

/// `(KL + ln(2 sqrt(n) / delta)) / n` for `n = (1 - alpha) |S|`.
pub fn epsilon_data_dependent(kl_total: f64, alpha: f64, n_total: usize, delta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    if n_total == 0 {
        return Err(invalid("dataset must be non-empty"));
    }
    epsilon_for(kl_total, (1.0 - alpha) * n_total as f64, delta)
}

/// `(KL + ln(2 sqrt(n) / delta)) / n` for an explicit held-out size `n`.
pub fn epsilon_for(kl_total: f64, n_bound: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(n_bound > 0.0) {
        return Err(invalid(format!("held-out size must be positive, got {n_bound}")));
    }
    if kl_total < 0.0 || kl_total.is_nan() {
        return Err(invalid(format!("KL must be non-negative, got {kl_total}")));
    }
    Ok((kl_total + (2.0 * n_bound.sqrt() / delta).ln()) / n_bound)
}

/// Which term of the minimum was smaller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `eps + sqrt(eps (eps + 2 emp))`
    Refined,
    /// `sqrt(eps / 2)`
    SquareRoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm1Bound {
    /// Clipped to `[0, 1]`.
    pub bound: f64,
    pub unclipped: f64,
    pub branch: Branch,
    pub refined_term: f64,
    pub sqrt_term: f64,
}

/// `emp + min(eps + sqrt(eps (eps + 2 emp)), sqrt(eps / 2))`.
pub fn bound_thm1(emp_gibbs: f64, eps: f64) -> Result<Thm1Bound> {
    if !(0.0..=1.0).contains(&emp_gibbs) {
        return Err(invalid(format!("empirical risk must lie in [0, 1], got {emp_gibbs}")));
    }
    if !(eps >= 0.0) {
        return Err(invalid(format!("epsilon must be non-negative, got {eps}")));
    }
    let refined_term = eps + (eps * (eps + 2.0 * emp_gibbs)).sqrt();
    let sqrt_term = (eps / 2.0).sqrt();
    let (gap, branch) = if refined_term <= sqrt_term {
        (refined_term, Branch::Refined)
    } else {
        (sqrt_term, Branch::SquareRoot)
    };
    let unclipped = emp_gibbs + gap;
    Ok(Thm1Bound {
        bound: unclipped.clamp(0.0, 1.0),
        unclipped,
        branch,
        refined_term,
        sqrt_term,
    })
}

/// Value of the certificate objective and its partial derivatives with
/// respect to the empirical term and to epsilon (both unclipped).
pub fn thm1_objective(emp: f64, eps: f64) -> (f64, f64, f64) {
    let emp = emp.max(0.0);
    let eps = eps.max(0.0);
    let root = (eps * (eps + 2.0 * emp)).sqrt();
    let refined = eps + root;
    let sq = (eps / 2.0).sqrt();
    if refined <= sq {
        let (d_emp, d_eps) = if root > 0.0 {
            (1.0 + eps / root, 1.0 + (eps + emp) / root)
        } else {
            (1.0, 1.0)
        };
        (emp + refined, d_emp, d_eps)
    } else {
        let d_eps = if sq > 0.0 { 0.25 / sq } else { 0.0 };
        (emp + sq, 1.0, d_eps)
    }
}

/// `kl^{-1}(emp || (KL + ln(2 sqrt(N) / delta)) / N)`.
pub fn bound_thm2(emp_gibbs: f64, kl_total: f64, n: usize, delta: f64) -> Result<f64> {
    let eps = epsilon_for(kl_total, n as f64, delta)?;
    Ok(kl_inverse(emp_gibbs, eps))
}

/// `emp + (zeta / n) KL`.
pub fn catoni_linear_objective(emp_gibbs: f64, kl_total: f64, n: f64, zeta: f64) -> f64 {
    emp_gibbs + zeta / n * kl_total
}

/// Upper confidence bound on the Gibbs risk from `m` sampled predictors:
/// `kl^{-1}(mean || ln(2 / delta') / m)`.
pub fn chernoff_gibbs_ci(mc_losses: &[f64], delta_prime: f64) -> Result<f64> {
    if mc_losses.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(delta_prime > 0.0 && delta_prime < 1.0) {
        return Err(invalid(format!("delta' must lie in (0, 1), got {delta_prime}")));
    }
    let m = mc_losses.len() as f64;
    let mean = mc_losses.iter().sum::<f64>() / m;
    Ok(kl_inverse(mean, (2.0 / delta_prime).ln() / m))
}

/// How the confidence budget is divided between the bound and the Monte
/// Carlo step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSplit {
    pub bound: f64,
    pub mc: f64,
}

impl Default for DeltaSplit {
    fn default() -> Self {
        Self { bound: 0.04, mc: 0.01 }
    }
}

impl DeltaSplit {
    /// Splits `total` in the default 4:1 ratio.
    pub fn from_total(total: f64) -> Result<Self> {
        if !(total > 0.0 && total < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {total}")));
        }
        Ok(Self {
            bound: 0.8 * total,
            mc: 0.2 * total,
        })
    }

    pub fn total(&self) -> f64 {
        self.bound + self.mc
    }
}

/// Every ingredient of a data-dependent certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Upper confidence estimate of the held-out Gibbs 0-1 risk.
    pub emp_gibbs_01: f64,
    /// Plain Monte Carlo mean before the confidence step.
    pub emp_gibbs_01_mean: f64,
    pub kl_total: f64,
    pub alpha: f64,
    pub n_total: usize,
    pub n_bound: usize,
    pub delta: f64,
    pub delta_bound: f64,
    pub delta_mc: f64,
    /// Number of hyperparameter configurations covered by a union bound.
    pub grid_size: usize,
    pub epsilon: f64,
    pub bound: f64,
    pub bound_unclipped: f64,
    pub branch: Branch,
    pub mc_samples: usize,
    pub mc_delta: f64,
}

impl BoundReport {
    /// Assembles the certificate from per-sample held-out 0-1 errors.
    pub fn from_samples(
        mc_losses: &[f64],
        kl_total: f64,
        n_total: usize,
        n_bound: usize,
        split: DeltaSplit,
        grid_size: usize,
    ) -> Result<Self> {
        if n_bound == 0 || n_bound > n_total {
            return Err(invalid(format!("held-out size {n_bound} invalid for {n_total} examples")));
        }
        let grid_size = grid_size.max(1);
        let upper = chernoff_gibbs_ci(mc_losses, split.mc)?;
        let mean = mc_losses.iter().sum::<f64>() / mc_losses.len() as f64;
        let epsilon = epsilon_for(kl_total + (grid_size as f64).ln(), n_bound as f64, split.bound)?;
        let thm = bound_thm1(upper, epsilon)?;
        Ok(Self {
            emp_gibbs_01: upper,
            emp_gibbs_01_mean: mean,
            kl_total,
            alpha: 1.0 - n_bound as f64 / n_total as f64,
            n_total,
            n_bound,
            delta: split.total(),
            delta_bound: split.bound,
            delta_mc: split.mc,
            grid_size,
            epsilon,
            bound: thm.bound,
            bound_unclipped: thm.unclipped,
            branch: thm.branch,
            mc_samples: mc_losses.len(),
            mc_delta: split.mc,
        })
    }
}
