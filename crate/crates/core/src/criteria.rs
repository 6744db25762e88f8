//! One-shot pruning scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Batch, DenseNet, LossKind};
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Magnitude,
    Snip,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Random, Criterion::Magnitude, Criterion::Snip];

    pub fn as_str(&self) -> &'static str {
        match self {
            Criterion::Magnitude => "magnitude",
            Criterion::Snip => "snip",
            Criterion::Random => "random",
        }
    }

    /// Scores for `net`; `batch` is only read by SNIP.
    pub fn scores(&self, net: &DenseNet, batch: &Batch, seed: u64) -> Result<Vec<f64>> {
        match self {
            Criterion::Magnitude => Ok(score_magnitude(net)),
            Criterion::Snip => score_snip(net, batch),
            Criterion::Random => Ok(score_random(net.num_weights(), seed)),
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" | "mbp" => Ok(Criterion::Magnitude),
            "snip" => Ok(Criterion::Snip),
            "random" => Ok(Criterion::Random),
            other => Err(invalid(format!("unknown criterion {other:?}"))),
        }
    }
}

/// `|W_i|`.
pub fn score_magnitude(net: &DenseNet) -> Vec<f64> {
    net.weights().iter().map(|w| w.abs()).collect()
}

/// `|W_i dL/dW_i|` for the clamped cross-entropy on `batch`, full mask.
pub fn score_snip(net: &DenseNet, batch: &Batch) -> Result<Vec<f64>> {
    score_snip_with(net, batch, LossKind::CrossEntropyClamped, 1.0)
}

/// SNIP scores for an arbitrary loss scaled by `scale`.
pub fn score_snip_with(net: &DenseNet, batch: &Batch, loss: LossKind, scale: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let grads = net.backward(batch, None, loss)?;
    net.weights()
        .iter()
        .zip(&grads.weights)
        .enumerate()
        .map(|(i, (w, g))| {
            let v = (w * g * scale).abs();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteGradient { index: i })
            }
        })
        .collect()
}

/// i.i.d. uniform scores on `(0, 1)`.
pub fn score_random(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = StreamKey::new(seed, Purpose::Scores).rng();
    (0..d).map(|_| rng.gen::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn magnitude_examples() {
        let net = DenseNet::from_parts(&[3, 1], Activation::Identity, vec![-3.0, 1.0, 0.0], vec![0.0]).unwrap();
        assert_eq!(score_magnitude(&net), vec![3.0, 1.0, 0.0]);
    }

    #[test]
    fn snip_single_neuron_is_analytic() {
        let (w, x, y) = (0.6, 1.4, -0.3);
        let net = DenseNet::from_parts(&[1, 1], Activation::Identity, vec![w], vec![0.0]).unwrap();
        let batch = Batch::regression(array![[x]], array![[y]]).unwrap();
        let s = score_snip_with(&net, &batch, LossKind::SquaredError, 1.0).unwrap();
        assert_relative_eq!(s[0], (w * x * (w * x - y)).abs(), epsilon = 1e-15);
    }

    #[test]
    fn snip_zero_gradient_gives_zero_score() {
        // exact fit: gradient vanishes
        let net = DenseNet::from_parts(&[1, 1], Activation::Identity, vec![2.0], vec![0.0]).unwrap();
        let batch = Batch::regression(array![[1.5]], array![[3.0]]).unwrap();
        assert_eq!(score_snip_with(&net, &batch, LossKind::SquaredError, 1.0).unwrap(), vec![0.0]);
    }

    #[test]
    fn snip_is_homogeneous_in_loss_scale() {
        let net = DenseNet::init_he_uniform(&[3, 4, 2], Activation::Relu, 4).unwrap();
        let batch = Batch::classification(array![[0.2, -0.5, 1.0]], vec![1]).unwrap();
        let a = score_snip_with(&net, &batch, LossKind::CrossEntropyClamped, 1.0).unwrap();
        let b = score_snip_with(&net, &batch, LossKind::CrossEntropyClamped, 3.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(3.0 * x, *y, max_relative = 1e-12);
        }
    }

    #[test]
    fn random_scores_are_seeded_and_distinct() {
        assert_eq!(score_random(100, 5), score_random(100, 5));
        assert_ne!(score_random(100, 5), score_random(100, 6));
        let mut s = score_random(10_000, 1);
        s.sort_by(f64::total_cmp);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}
