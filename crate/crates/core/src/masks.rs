//! Stochastic pruning masks.
//!
//! A [`MaskDistribution`] holds independent keep probabilities `lambda`,
//! stored through a trainable raw parameterization. Hard masks come from
//! Bernoulli sampling or top-k thresholding; soft masks come from the
//! two-category concrete (Gumbel-softmax) relaxation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::StreamKey;

/// Relaxation temperature used unless configured otherwise.
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMode {
    Sigmoid,
    Clamp,
}

impl ParamMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamMode::Sigmoid => "sigmoid",
            ParamMode::Clamp => "clamp",
        }
    }
}

impl std::str::FromStr for ParamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(ParamMode::Sigmoid),
            "clamp" => Ok(ParamMode::Clamp),
            other => Err(invalid(format!("unknown parameterization {other:?}"))),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Keep probability from a raw parameter.
#[inline]
pub fn map_probability(raw: f64, mode: ParamMode) -> f64 {
    match mode {
        ParamMode::Sigmoid => sigmoid(raw),
        ParamMode::Clamp => raw.clamp(0.0, 1.0),
    }
}

/// `d lambda / d raw`; zero outside `(0, 1)` in clamp mode.
#[inline]
pub fn map_probability_derivative(raw: f64, mode: ParamMode) -> f64 {
    match mode {
        ParamMode::Sigmoid => {
            let l = sigmoid(raw);
            l * (1.0 - l)
        }
        ParamMode::Clamp => {
            if raw > 0.0 && raw < 1.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Fraction of weights pruned; the keep count is `round((1 - s) D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityTarget(f64);

impl SparsityTarget {
    pub fn new(s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(invalid(format!("sparsity must lie in [0, 1], got {s}")));
        }
        Ok(Self(s))
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    pub fn keep_count(&self, d: usize) -> usize {
        (((1.0 - self.0) * d as f64).round() as usize).min(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDistribution {
    raw: Vec<f64>,
    mode: ParamMode,
    beta: f64,
}

impl MaskDistribution {
    /// Builds a distribution whose mapped probabilities equal `lambda`.
    pub fn from_lambda(lambda: &[f64], mode: ParamMode, beta: f64) -> Result<Self> {
        if let Some((i, l)) = lambda.iter().enumerate().find(|(_, l)| !(0.0..=1.0).contains(*l)) {
            return Err(invalid(format!("keep probability {l} at index {i} outside [0, 1]")));
        }
        check_beta(beta)?;
        let raw = match mode {
            ParamMode::Clamp => lambda.to_vec(),
            ParamMode::Sigmoid => lambda.iter().map(|&l| logit(l)).collect(),
        };
        Ok(Self { raw, mode, beta })
    }

    pub fn from_raw(raw: Vec<f64>, mode: ParamMode, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        if raw.iter().any(|r| r.is_nan()) {
            return Err(invalid("raw parameters contain NaN"));
        }
        Ok(Self { raw, mode, beta })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn mode(&self) -> ParamMode {
        self.mode
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        self.beta = beta;
        Ok(self)
    }

    /// Same probabilities, different parameterization.
    pub fn with_mode(self, mode: ParamMode) -> Self {
        if mode == self.mode {
            return self;
        }
        Self::from_lambda(&self.lambda(), mode, self.beta).expect("probabilities already valid")
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.raw
    }

    pub fn lambda_at(&self, i: usize) -> f64 {
        map_probability(self.raw[i], self.mode)
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| map_probability(r, self.mode)).collect()
    }

    pub fn lambda_derivative(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| map_probability_derivative(r, self.mode)).collect()
    }

    /// Expected fraction of pruned weights, `mean(1 - lambda)`.
    pub fn expected_sparsity(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.lambda().iter().map(|l| 1.0 - l).sum::<f64>() / self.len() as f64
    }

    /// Clips the probabilities into `[lo, hi]`.
    pub fn clip(&mut self, lo: f64, hi: f64) {
        for r in &mut self.raw {
            let l = map_probability(*r, self.mode).clamp(lo, hi);
            *r = match self.mode {
                ParamMode::Clamp => l,
                ParamMode::Sigmoid => logit(l),
            };
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {beta}")));
    }
    Ok(())
}

/// Every weight kept with probability `1 - s`.
pub fn init_isotropic(d: usize, s: f64) -> Result<MaskDistribution> {
    let s = SparsityTarget::new(s)?.value();
    MaskDistribution::from_lambda(&vec![1.0 - s; d], ParamMode::Clamp, DEFAULT_BETA)
}

/// Two-level probabilities around the top-k mask of `scores`.
///
/// The `k = round((1 - s) D)` highest-scoring weights (ties to the lowest
/// index) get `1 - s eps / (1 - s)`; the rest get `eps`. When `k` equals
/// `(1 - s) D` exactly the expected sparsity is `s`.
pub fn init_block_isotropic(scores: &[f64], s: f64, eps: f64) -> Result<MaskDistribution> {
    let target = SparsityTarget::new(s)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid(format!("epsilon must lie in (0, 1), got {eps}")));
    }
    if s >= 1.0 {
        return Err(Error::BlockIsotropic(f64::INFINITY));
    }
    let ratio = s * eps / (1.0 - s);
    if ratio >= 1.0 {
        return Err(Error::BlockIsotropic(ratio));
    }
    let keep = threshold_topk(scores, target.value());
    let high = 1.0 - ratio;
    let lambda: Vec<f64> = keep.bits().iter().map(|&k| if k { high } else { eps }).collect();
    MaskDistribution::from_lambda(&lambda, ParamMode::Clamp, DEFAULT_BETA)
}

/// A deterministic 0/1 mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask(Vec<bool>);

impl BinaryMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn ones(d: usize) -> Self {
        Self(vec![true; d])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// LSB-first bit packing, `ceil(D / 8)` bytes.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.0.len().div_ceil(8)];
        for (i, &b) in self.0.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8], d: usize) -> Result<Self> {
        if bytes.len() != d.div_ceil(8) {
            return Err(invalid(format!("{} bytes cannot hold exactly {d} bits", bytes.len())));
        }
        Ok(Self((0..d).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()))
    }
}

/// Independent Bernoulli draws addressed by `(key, weight index)`.
pub fn sample_bernoulli(dist: &MaskDistribution, key: StreamKey) -> BinaryMask {
    let mut u = key.weights_from(0);
    BinaryMask(
        (0..dist.len())
            .map(|i| {
                let draw = u.next_weight();
                draw[0] < dist.lambda_at(i)
            })
            .collect(),
    )
}

/// Relaxed mask values and their pathwise derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteSample {
    pub values: Vec<f64>,
    /// `d value / d raw parameter` for each weight.
    pub draw_grad: Vec<f64>,
}

/// One relaxed draw for a single weight from its Gumbel pair.
///
/// `X = sigmoid((ln lambda - ln(1 - lambda) + G1 - G0) / beta)`, the
/// two-category concrete in logistic form. Returns `(X, dX/draw)`.
#[inline]
pub fn concrete_value(raw: f64, mode: ParamMode, beta: f64, u1: f64, u0: f64) -> (f64, f64) {
    let lambda = map_probability(raw, mode);
    if lambda <= 0.0 || lambda >= 1.0 {
        return (lambda, 0.0);
    }
    let g1 = -(-u1.ln()).ln();
    let g0 = -(-u0.ln()).ln();
    let (log_odds, dlogodds_draw) = match mode {
        ParamMode::Sigmoid => (raw, 1.0),
        ParamMode::Clamp => (logit(lambda), 1.0 / (lambda * (1.0 - lambda))),
    };
    let x = sigmoid((log_odds + g1 - g0) / beta);
    (x, x * (1.0 - x) / beta * dlogodds_draw)
}

/// Relaxed (concrete) mask sample; weights with `lambda` in `{0, 1}` take
/// the hard value with zero derivative.
pub fn sample_concrete(dist: &MaskDistribution, key: StreamKey) -> ConcreteSample {
    let mut u = key.weights_from(0);
    let mut values = Vec::with_capacity(dist.len());
    let mut draw_grad = Vec::with_capacity(dist.len());
    for &raw in dist.raw() {
        let draw = u.next_weight();
        let (x, dx) = concrete_value(raw, dist.mode, dist.beta, draw[0], draw[1]);
        values.push(x);
        draw_grad.push(dx);
    }
    ConcreteSample { values, draw_grad }
}

/// Keeps the `round((1 - s) D)` largest values, ties to the lowest index.
pub fn threshold_topk(values: &[f64], s: f64) -> BinaryMask {
    let k = SparsityTarget(s.clamp(0.0, 1.0)).keep_count(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut bits = vec![false; values.len()];
    for &i in &order[..k] {
        bits[i] = true;
    }
    BinaryMask(bits)
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    term(p) + term(1.0 - p)
}

/// Mean per-weight binary entropy, in `[0, 1]`.
pub fn mask_entropy(lambda: &[f64]) -> f64 {
    if lambda.is_empty() {
        return 0.0;
    }
    lambda.iter().map(|&p| binary_entropy(p)).sum::<f64>() / lambda.len() as f64
}

/// Shared kept weights divided by the common keep count.
pub fn mask_overlap(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("masks of length {} and {}", a.len(), b.len())));
    }
    let k = a.popcount();
    if k != b.popcount() {
        return Err(invalid(format!(
            "overlap needs equal keep counts, got {k} and {}",
            b.popcount()
        )));
    }
    if k == 0 {
        return Ok(1.0);
    }
    let shared = a.0.iter().zip(&b.0).filter(|(x, y)| **x && **y).count();
    Ok(shared as f64 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn isotropic_examples() {
        assert_eq!(init_isotropic(4, 0.75).unwrap().lambda(), vec![0.25; 4]);
        assert_eq!(init_isotropic(3, 0.0).unwrap().lambda(), vec![1.0; 3]);
        assert_eq!(init_isotropic(3, 1.0).unwrap().lambda(), vec![0.0; 3]);
        assert!(init_isotropic(3, 1.5).is_err());
    }

    #[test]
    fn block_isotropic_examples() {
        let d = init_block_isotropic(&[4.0, 3.0, 2.0, 1.0], 0.5, 1e-4).unwrap();
        let l = d.lambda();
        assert_relative_eq!(l[0], 0.9999, epsilon = 1e-15);
        assert_relative_eq!(l[1], 0.9999, epsilon = 1e-15);
        assert_eq!(&l[2..], &[1e-4, 1e-4]);
        assert_relative_eq!(d.expected_sparsity(), 0.5, epsilon = 1e-15);

        let scores: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let d = init_block_isotropic(&scores, 0.9, 0.01).unwrap();
        let l = d.lambda();
        assert_relative_eq!(l[9], 0.91, epsilon = 1e-15);
        assert!(l[..9].iter().all(|&v| v == 0.01));
        assert_relative_eq!(d.expected_sparsity(), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn block_isotropic_rejects_large_ratio() {
        // s eps / (1 - s) = 0.9 * 0.5 / 0.1 = 4.5
        match init_block_isotropic(&[1.0, 2.0], 0.9, 0.5) {
            Err(Error::BlockIsotropic(r)) => assert_relative_eq!(r, 4.5, epsilon = 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bernoulli_degenerate_and_frequency() {
        let dist = MaskDistribution::from_lambda(&[1.0, 0.0], ParamMode::Clamp, 0.5).unwrap();
        for step in 0..50 {
            let m = sample_bernoulli(&dist, StreamKey::new(1, Purpose::Mask).at_step(step));
            assert_eq!(m.bits(), &[true, false]);
        }
        let dist = MaskDistribution::from_lambda(&vec![0.3; 100_000], ParamMode::Clamp, 0.5).unwrap();
        let m = sample_bernoulli(&dist, StreamKey::new(2, Purpose::Mask));
        let freq = m.popcount() as f64 / 1e5;
        assert!((freq - 0.3).abs() < 0.01, "{freq}");
    }

    #[test]
    fn concrete_hard_threshold_matches_lambda_at_low_temperature() {
        let dist = MaskDistribution::from_lambda(&vec![0.7; 100_000], ParamMode::Clamp, 0.01).unwrap();
        let x = sample_concrete(&dist, StreamKey::new(3, Purpose::Mask));
        let freq = x.values.iter().filter(|&&v| v > 0.5).count() as f64 / 1e5;
        assert!((freq - 0.7).abs() < 0.01, "{freq}");
    }

    #[test]
    fn concrete_symmetric_at_half() {
        let dist = MaskDistribution::from_lambda(&vec![0.5; 100_001], ParamMode::Clamp, 0.5).unwrap();
        let mut x = sample_concrete(&dist, StreamKey::new(4, Purpose::Mask)).values;
        x.sort_by(f64::total_cmp);
        assert!((x[50_000] - 0.5).abs() < 0.01);
    }

    #[test]
    fn concrete_short_circuits_extremes() {
        let dist = MaskDistribution::from_lambda(&[0.0, 1.0], ParamMode::Clamp, 0.5).unwrap();
        let x = sample_concrete(&dist, StreamKey::new(5, Purpose::Mask));
        assert_eq!(x.values, vec![0.0, 1.0]);
        assert_eq!(x.draw_grad, vec![0.0, 0.0]);
    }

    #[test]
    fn concrete_pathwise_derivative_matches_differences() {
        for mode in [ParamMode::Sigmoid, ParamMode::Clamp] {
            let raw = match mode {
                ParamMode::Sigmoid => 0.4,
                ParamMode::Clamp => 0.35,
            };
            let (u1, u0) = (0.31, 0.77);
            let (_, dx) = concrete_value(raw, mode, 0.5, u1, u0);
            let h = 1e-6;
            let fd = (concrete_value(raw + h, mode, 0.5, u1, u0).0 - concrete_value(raw - h, mode, 0.5, u1, u0).0) / (2.0 * h);
            assert_relative_eq!(dx, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn topk_examples() {
        assert_eq!(threshold_topk(&[0.9, 0.1, 0.8, 0.2], 0.5).bits(), &[true, false, true, false]);
        assert_eq!(threshold_topk(&[0.5; 4], 0.5).bits(), &[true, true, false, false]);
    }

    #[test]
    fn mapping_examples() {
        assert_eq!(map_probability(0.0, ParamMode::Sigmoid), 0.5);
        assert_eq!(map_probability(1.7, ParamMode::Clamp), 1.0);
        assert_eq!(map_probability_derivative(1.7, ParamMode::Clamp), 0.0);
        let d = map_probability_derivative(2.0, ParamMode::Sigmoid);
        let h = 1e-6;
        let fd = (sigmoid(2.0 + h) - sigmoid(2.0 - h)) / (2.0 * h);
        assert_relative_eq!(d, fd, epsilon = 1e-9);
        assert_relative_eq!(d, 0.104_993_585_403_506_5, epsilon = 1e-12);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(mask_entropy(&[0.5; 8]), 1.0);
        assert_eq!(mask_entropy(&[0.0, 1.0, 1.0]), 0.0);
        assert_relative_eq!(mask_entropy(&[0.25, 0.75]), 0.811_278_124_459_132_8, epsilon = 1e-12);
    }

    #[test]
    fn overlap_examples() {
        let a = BinaryMask::new(vec![true, true, false, false]);
        let b = BinaryMask::new(vec![true, false, true, false]);
        let c = BinaryMask::new(vec![false, false, true, true]);
        assert_eq!(mask_overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_overlap(&a, &c).unwrap(), 0.0);
        assert_eq!(mask_overlap(&a, &b).unwrap(), 0.5);
        assert!(mask_overlap(&a, &BinaryMask::new(vec![true, false, false, false])).is_err());
    }

    #[test]
    fn sigmoid_mode_roundtrips_extremes() {
        let d = MaskDistribution::from_lambda(&[0.0, 0.25, 1.0], ParamMode::Sigmoid, 0.5).unwrap();
        let l = d.lambda();
        assert_eq!(l[0], 0.0);
        assert_relative_eq!(l[1], 0.25, epsilon = 1e-15);
        assert_eq!(l[2], 1.0);
    }

    proptest! {
        #[test]
        fn mapping_stays_in_unit_interval(raw in -1e3f64..1e3, sig in any::<bool>()) {
            let mode = if sig { ParamMode::Sigmoid } else { ParamMode::Clamp };
            let l = map_probability(raw, mode);
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn sigmoid_derivative_matches_differences(raw in -8.0f64..8.0) {
            let h = 1e-5;
            let fd = (sigmoid(raw + h) - sigmoid(raw - h)) / (2.0 * h);
            prop_assert!((map_probability_derivative(raw, ParamMode::Sigmoid) - fd).abs() < 1e-6);
        }

        #[test]
        fn topk_popcount_and_order(values in prop::collection::vec(0.0f64..1.0, 1..200), s in 0.0f64..1.0) {
            let m = threshold_topk(&values, s);
            let k = SparsityTarget::new(s).unwrap().keep_count(values.len());
            prop_assert_eq!(m.popcount(), k);
            let min_kept = values.iter().zip(m.bits()).filter(|(_, &b)| b).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
            let max_dropped = values.iter().zip(m.bits()).filter(|(_, &b)| !b).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_kept >= max_dropped);
        }

        #[test]
        fn topk_invariant_under_monotone_maps(values in prop::collection::vec(0.001f64..0.999, 1..100), s in 0.0f64..1.0) {
            let mapped: Vec<f64> = values.iter().map(|&v| logit(v) * 3.0 + 1.0).collect();
            prop_assert_eq!(threshold_topk(&values, s), threshold_topk(&mapped, s));
        }

        #[test]
        fn block_isotropic_sparsity_within_one_over_d(scores in prop::collection::vec(-5.0f64..5.0, 2..300), s in 0.05f64..0.95) {
            let d = init_block_isotropic(&scores, s, 1e-4).unwrap();
            prop_assert!((d.expected_sparsity() - s).abs() <= 1.0 / scores.len() as f64 + 1e-12);
        }

        #[test]
        fn packing_roundtrips(bits in prop::collection::vec(any::<bool>(), 0..100)) {
            let m = BinaryMask::new(bits);
            prop_assert_eq!(BinaryMask::unpack(&m.pack(), m.len()).unwrap(), m);
        }
    }
}
