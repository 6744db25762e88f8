//! Keep-probability gradients of the expected loss under a Bernoulli mask:
//! exact enumeration, the shared-sample Monte Carlo estimator and the
//! concrete-relaxation (pathwise) estimator.

use serde::{Deserialize, Serialize};

use super::relaxed_draw;
use crate::error::{invalid, Error, Result};
use crate::masks::{MaskDistribution, ParamMode};
use crate::nn::{ce_clamp_ceiling, ce_clamped_effective, Batch, DenseNet, LossKind};
use crate::rng::{derive_seed, Purpose, StreamKey};

/// Largest mask dimension accepted by exact enumeration.
pub const EXACT_MAX_DIM: usize = 15;

fn check_lambda(lambda: &[f64]) -> Result<()> {
    if let Some(l) = lambda.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(invalid(format!("keep probability {l} outside [0, 1]")));
    }
    Ok(())
}

/// `d/d lambda_i E[L(b)] = E[L(b) | b_i = 1] - E[L(b) | b_i = 0]`, by
/// enumerating all `2^D` masks.
pub fn exact_lambda_gradient<F>(lambda: &[f64], mut loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let d = lambda.len();
    if d > EXACT_MAX_DIM {
        return Err(invalid(format!("exact enumeration needs D <= {EXACT_MAX_DIM}, got {d}")));
    }
    check_lambda(lambda)?;
    let total = 1usize << d;
    let mut values = Vec::with_capacity(total);
    let mut mask = vec![0.0; d];
    for bits in 0..total {
        for (j, m) in mask.iter_mut().enumerate() {
            *m = ((bits >> j) & 1) as f64;
        }
        values.push(loss(&mask)?);
    }
    let mut grad = vec![0.0; d];
    for (i, g) in grad.iter_mut().enumerate() {
        for bits in (0..total).filter(|b| b >> i & 1 == 1) {
            let mut p = 1.0;
            for (j, &l) in lambda.iter().enumerate() {
                if j != i {
                    p *= if bits >> j & 1 == 1 { l } else { 1.0 - l };
                }
            }
            *g += p * (values[bits] - values[bits ^ (1 << i)]);
        }
    }
    Ok(grad)
}

/// Expected loss `E[L(b)]` by enumeration.
pub fn exact_expected_loss<F>(lambda: &[f64], mut loss: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let d = lambda.len();
    if d > EXACT_MAX_DIM {
        return Err(invalid(format!("exact enumeration needs D <= {EXACT_MAX_DIM}, got {d}")));
    }
    check_lambda(lambda)?;
    let mut mask = vec![0.0; d];
    let mut total = 0.0;
    for bits in 0..1usize << d {
        let mut p = 1.0;
        for (j, m) in mask.iter_mut().enumerate() {
            let on = (bits >> j) & 1 == 1;
            *m = if on { 1.0 } else { 0.0 };
            p *= if on { lambda[j] } else { 1.0 - lambda[j] };
        }
        if p > 0.0 {
            total += p * loss(&mask)?;
        }
    }
    Ok(total)
}

/// Shared-sample estimate: the mean loss over draws with `b_i = 1` minus the
/// mean over draws with `b_i = 0`. `None` where every draw agreed on `b_i`.
pub fn algorithm1_lambda_gradient<F>(lambda: &[f64], m: usize, key: StreamKey, mut loss: F) -> Result<Vec<Option<f64>>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if m == 0 {
        return Err(invalid("sample count must be positive"));
    }
    check_lambda(lambda)?;
    let d = lambda.len();
    let (mut sum_on, mut sum_off) = (vec![0.0; d], vec![0.0; d]);
    let mut count_on = vec![0usize; d];
    let mut mask = vec![0.0; d];
    for k in 0..m as u64 {
        let mut u = key.at_step(k).weights_from(0);
        for (mi, &l) in mask.iter_mut().zip(lambda) {
            *mi = if u.next_weight()[0] < l { 1.0 } else { 0.0 };
        }
        let value = loss(&mask)?;
        for i in 0..d {
            if mask[i] == 1.0 {
                sum_on[i] += value;
                count_on[i] += 1;
            } else {
                sum_off[i] += value;
            }
        }
    }
    Ok((0..d)
        .map(|i| {
            let on = count_on[i];
            (on > 0 && on < m).then(|| sum_on[i] / on as f64 - sum_off[i] / (m - on) as f64)
        })
        .collect())
}

/// Loss of `net` on `batch` as a function of a mask over its weights,
/// normalized clamped cross-entropy for classification targets.
pub fn net_mask_loss<'a>(net: &'a DenseNet, batch: &'a Batch) -> impl FnMut(&[f64]) -> Result<f64> + 'a {
    move |mask: &[f64]| {
        let eff = net.effective_weights(Some(mask))?;
        Ok(ce_clamped_effective(net, batch, &eff)? / ce_clamp_ceiling())
    }
}

/// Pathwise keep-probability gradient averaged over `samples` concrete
/// draws, expressed per unit of `lambda` (not of the raw parameter).
pub fn gs_lambda_gradient(net: &DenseNet, batch: &Batch, dist: &MaskDistribution, samples: usize, key: StreamKey) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(invalid("sample count must be positive"));
    }
    let d = net.num_weights();
    if dist.len() != d {
        return Err(Error::Shape(format!("mask has {} entries, network {d} weights", dist.len())));
    }
    let w = net.weights();
    let ceiling = ce_clamp_ceiling();
    let mut grad = vec![0.0; d];
    for k in 0..samples as u64 {
        let draw = relaxed_draw(dist.raw(), dist.mode(), dist.beta(), false, key.at_step(k));
        let eff: Vec<f64> = w.iter().zip(&draw.x).map(|(w, x)| w * x).collect();
        let g = net.backward_effective(batch, &eff, LossKind::CrossEntropyClamped)?;
        for i in 0..d {
            grad[i] += g.weights[i] / ceiling * w[i] * draw.dx[i];
        }
    }
    let dl = dist.lambda_derivative();
    Ok(grad
        .iter()
        .zip(dl)
        .map(|(g, dl)| if dl > 0.0 { g / samples as f64 / dl } else { 0.0 })
        .collect())
}

/// Agreement between two gradient vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientAgreement {
    pub sign_agreement: f64,
    pub correlation: f64,
    pub max_abs_gap: f64,
}

pub fn compare_gradients(a: &[f64], b: &[f64]) -> Result<GradientAgreement> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("gradients of length {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let signs = a.iter().zip(b).filter(|(x, y)| x.signum() == y.signum()).count() as f64 / n;
    Ok(GradientAgreement {
        sign_agreement: signs,
        correlation: pearson(a, b),
        max_abs_gap: a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub samples: usize,
    /// Root-mean-square gap to the exact gradient over repeats and
    /// estimated coordinates.
    pub rms_error: f64,
    /// Coordinate estimates missing because all draws agreed, summed over
    /// repeats.
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub dim: usize,
    pub exact: Vec<f64>,
    pub gs_by_beta: Vec<(f64, Vec<f64>, GradientAgreement)>,
    pub monte_carlo: Vec<McRow>,
    pub mc_slope: f64,
}

/// Compares the relaxed and shared-sample estimators with exact
/// enumeration on a small network.
#[allow(clippy::too_many_arguments)]
pub fn oracle_report(
    net: &DenseNet,
    batch: &Batch,
    lambda: &[f64],
    betas: &[f64],
    gs_samples: usize,
    mc_sizes: &[usize],
    mc_repeats: usize,
    seed: u64,
) -> Result<OracleReport> {
    let exact = exact_lambda_gradient(lambda, net_mask_loss(net, batch))?;
    let mut gs_by_beta = Vec::new();
    for (k, &beta) in betas.iter().enumerate() {
        let dist = MaskDistribution::from_lambda(lambda, ParamMode::Sigmoid, beta)?;
        let key = StreamKey::new(derive_seed(seed, k as u64), Purpose::Mask);
        let gs = gs_lambda_gradient(net, batch, &dist, gs_samples, key)?;
        let agree = compare_gradients(&gs, &exact)?;
        gs_by_beta.push((beta, gs, agree));
    }
    let mut monte_carlo = Vec::new();
    for (k, &m) in mc_sizes.iter().enumerate() {
        let base = derive_seed(seed, 1000 + k as u64);
        let (mut sq, mut count, mut missing) = (0.0, 0usize, 0usize);
        for r in 0..mc_repeats.max(1) as u64 {
            let est = algorithm1_lambda_gradient(lambda, m, StreamKey::new(derive_seed(base, r), Purpose::MonteCarlo), net_mask_loss(net, batch))?;
            for (e, x) in est.iter().zip(&exact) {
                match e {
                    Some(e) => {
                        sq += (e - x).powi(2);
                        count += 1;
                    }
                    None => missing += 1,
                }
            }
        }
        monte_carlo.push(McRow {
            samples: m,
            rms_error: (sq / count.max(1) as f64).sqrt(),
            missing,
        });
    }
    let usable: Vec<&McRow> = monte_carlo.iter().filter(|r| r.rms_error > 0.0).collect();
    let mc_slope = if usable.len() >= 2 {
        log_log_slope(
            &usable.iter().map(|r| r.samples as f64).collect::<Vec<_>>(),
            &usable.iter().map(|r| r.rms_error).collect::<Vec<_>>(),
        )
    } else {
        f64::NAN
    };
    Ok(OracleReport {
        dim: lambda.len(),
        exact,
        gs_by_beta,
        monte_carlo,
        mc_slope,
    })
}
