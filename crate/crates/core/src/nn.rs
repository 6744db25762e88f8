//! Dense multilayer perceptrons with manual backpropagation.
//!
//! All weights live in one flat vector of length `D`. Layer `l` occupies a
//! contiguous row-major `(out, in)` block, layers in order; biases live in a
//! second flat vector with the same layer order. Masks are length-`D` slices
//! multiplied into the weights only.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{Purpose, StreamKey};

/// Softmax probabilities below this are clamped before taking the log.
pub const CE_PROB_FLOOR: f64 = 1e-4;

/// Largest value the clamped cross-entropy can take, `ln(1e4)`.
pub fn ce_clamp_ceiling() -> f64 {
    -CE_PROB_FLOOR.ln()
}

/// Rows evaluated per chunk when scoring a whole dataset.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropyClamped,
    SquaredError,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Array2<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs (examples x features) with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn classification(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        Self::new(inputs, Targets::Classes(labels))
    }

    pub fn regression(inputs: Array2<f64>, values: Array2<f64>) -> Result<Self> {
        Self::new(inputs, Targets::Values(values))
    }

    fn new(inputs: Array2<f64>, targets: Targets) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(c) => Some(c),
            Targets::Values(_) => None,
        }
    }

    /// Copies the given rows into a new batch.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let inputs = self.inputs.select(Axis(0), rows);
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
            Targets::Values(v) => Targets::Values(v.select(Axis(0), rows)),
        };
        Batch { inputs, targets }
    }

    fn slice_rows(&self, range: Range<usize>) -> Batch {
        let inputs = self.inputs.slice(s![range.clone(), ..]).to_owned();
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(c[range].to_vec()),
            Targets::Values(v) => Targets::Values(v.slice(s![range, ..]).to_owned()),
        };
        Batch { inputs, targets }
    }
}

/// Position of a flat weight index inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightSlot {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layer_dims: Vec<usize>,
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

/// Gradient of the mean batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub loss: f64,
}

impl DenseNet {
    /// Zero weights and biases.
    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(invalid(format!(
                "layer_dims must hold at least two positive sizes, got {layer_dims:?}"
            )));
        }
        let (d, b) = Self::param_counts(layer_dims)
            .ok_or_else(|| invalid(format!("parameter count of {layer_dims:?} overflows")))?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights: vec![0.0; d],
            biases: vec![0.0; b],
            activation,
        })
    }

    /// `(weights, biases)` for `layer_dims`, `None` on overflow.
    pub fn param_counts(layer_dims: &[usize]) -> Option<(usize, usize)> {
        let d = layer_dims
            .windows(2)
            .try_fold(0usize, |acc, w| acc.checked_add(w[0].checked_mul(w[1])?))?;
        let b = layer_dims.get(1..)?.iter().try_fold(0usize, |acc, &x| acc.checked_add(x))?;
        Some((d, b))
    }

    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn init_he_uniform(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation)?;
        let mut rng = StreamKey::new(seed, Purpose::Init).rng();
        for l in 0..net.num_layers() {
            let bound = (6.0 / net.layer_dims[l] as f64).sqrt();
            let dist = Uniform::new(-bound, bound);
            let range = net.weight_range(l);
            for w in &mut net.weights[range] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(net)
    }

    pub fn from_parts(
        layer_dims: &[usize],
        activation: Activation,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation)?;
        if weights.len() != net.weights.len() || biases.len() != net.biases.len() {
            return Err(Error::Shape(format!(
                "expected {} weights and {} biases, got {} and {}",
                net.weights.len(),
                net.biases.len(),
                weights.len(),
                biases.len()
            )));
        }
        net.weights = weights;
        net.biases = biases;
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// `D`, the number of maskable weights.
    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }

    pub fn num_biases(&self) -> usize {
        self.biases.len()
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    pub fn weight_range(&self, layer: usize) -> Range<usize> {
        let start: usize = self.layer_dims[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1])
            .sum();
        start..start + self.layer_dims[layer] * self.layer_dims[layer + 1]
    }

    pub fn bias_range(&self, layer: usize) -> Range<usize> {
        let start: usize = self.layer_dims[1..=layer].iter().sum();
        start..start + self.layer_dims[layer + 1]
    }

    pub fn locate(&self, index: usize) -> Option<WeightSlot> {
        (0..self.num_layers()).find_map(|layer| {
            let range = self.weight_range(layer);
            range.contains(&index).then(|| {
                let offset = index - range.start;
                let cols = self.layer_dims[layer];
                WeightSlot {
                    layer,
                    row: offset / cols,
                    col: offset % cols,
                }
            })
        })
    }

    /// Zeroes every weight whose mask entry is zero.
    pub fn apply_mask_in_place(&mut self, mask: &[f64]) -> Result<()> {
        self.check_mask(mask)?;
        for (w, &m) in self.weights.iter_mut().zip(mask) {
            *w *= m;
        }
        Ok(())
    }

    fn check_mask(&self, mask: &[f64]) -> Result<()> {
        if mask.len() != self.num_weights() {
            return Err(Error::Shape(format!(
                "mask has length {} but the network has {} weights",
                mask.len(),
                self.num_weights()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.layer_dims[0] {
            return Err(Error::Shape(format!(
                "inputs have {} features but the network expects {}",
                inputs.ncols(),
                self.layer_dims[0]
            )));
        }
        Ok(())
    }

    /// Weights multiplied by `mask`, or the weights themselves.
    pub fn effective_weights(&self, mask: Option<&[f64]>) -> Result<Vec<f64>> {
        match mask {
            Some(m) => {
                self.check_mask(m)?;
                Ok(self.weights.iter().zip(m).map(|(w, m)| w * m).collect())
            }
            None => Ok(self.weights.clone()),
        }
    }

    fn layer_view<'a>(&self, flat: &'a [f64], layer: usize) -> ArrayView2<'a, f64> {
        let range = self.weight_range(layer);
        ArrayView2::from_shape(
            (self.layer_dims[layer + 1], self.layer_dims[layer]),
            &flat[range],
        )
        .expect("layer block matches layer_dims")
    }

    /// Logits for `inputs`, weights multiplied element-wise by `mask`.
    pub fn forward(&self, inputs: ArrayView2<f64>, mask: Option<&[f64]>) -> Result<Array2<f64>> {
        self.check_inputs(&inputs)?;
        let eff = self.effective_weights(mask)?;
        Ok(self.forward_effective(inputs, &eff))
    }

    /// Forward pass with an explicit effective weight vector (no checks).
    pub fn forward_effective(&self, inputs: ArrayView2<f64>, eff: &[f64]) -> Array2<f64> {
        let mut a = inputs.to_owned();
        for l in 0..self.num_layers() {
            a = self.affine(&a, eff, l);
            if l + 1 < self.num_layers() {
                self.activate(&mut a);
            }
        }
        a
    }

    fn affine(&self, a: &Array2<f64>, eff: &[f64], layer: usize) -> Array2<f64> {
        let w = self.layer_view(eff, layer);
        let mut z = a.dot(&w.t());
        let b = &self.biases[self.bias_range(layer)];
        for mut row in z.rows_mut() {
            for (v, bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
        z
    }

    fn activate(&self, z: &mut Array2<f64>) {
        if self.activation == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Gradient of the mean loss with respect to the underlying weights when
    /// the forward pass uses `weights * mask`; zero wherever the mask is zero.
    pub fn backward(&self, batch: &Batch, mask: Option<&[f64]>, loss: LossKind) -> Result<Gradients> {
        self.check_inputs(&batch.inputs.view())?;
        let eff = self.effective_weights(mask)?;
        let mut grads = self.backward_effective(batch, &eff, loss)?;
        if let Some(m) = mask {
            for (g, &m) in grads.weights.iter_mut().zip(m) {
                *g *= m;
            }
        }
        Ok(grads)
    }

    /// Gradient of the mean loss with respect to the effective weights.
    pub fn backward_effective(&self, batch: &Batch, eff: &[f64], loss: LossKind) -> Result<Gradients> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let layers = self.num_layers();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(batch.inputs.clone());
        for l in 0..layers {
            let mut z = self.affine(&acts[l], eff, l);
            if l + 1 < layers {
                self.activate(&mut z);
            }
            acts.push(z);
        }
        let logits = acts.pop().unwrap();
        let (loss_value, mut delta) = loss_and_delta(&logits, &batch.targets, loss)?;

        let mut gw = vec![0.0; self.num_weights()];
        let mut gb = vec![0.0; self.num_biases()];
        for l in (0..layers).rev() {
            let a_prev = &acts[l];
            let block = delta.t().dot(a_prev);
            let range = self.weight_range(l);
            gw[range].copy_from_slice(block.as_slice().expect("standard layout"));
            let bsum = delta.sum_axis(Axis(0));
            gb[self.bias_range(l)].copy_from_slice(bsum.as_slice().unwrap());
            if l > 0 {
                let mut next = delta.dot(&self.layer_view(eff, l));
                if self.activation == Activation::Relu {
                    next.zip_mut_with(a_prev, |d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                }
                delta = next;
            }
        }
        Ok(Gradients {
            weights: gw,
            biases: gb,
            loss: loss_value,
        })
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Per-sample clamped cross-entropy `-ln(max(p_y, 1e-4))`.
pub fn clamped_ce_per_sample(logits: &Array2<f64>, labels: &[usize]) -> Result<Array1<f64>> {
    let probs = softmax_rows(logits);
    let mut out = Array1::zeros(labels.len());
    for (i, (&y, row)) in labels.iter().zip(probs.rows()).enumerate() {
        if y >= row.len() {
            return Err(invalid(format!("label {y} at sample {i} exceeds class count")));
        }
        let l = -row[y].max(CE_PROB_FLOOR).ln();
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { sample: i });
        }
        out[i] = l;
    }
    Ok(out)
}

/// Mean loss and its gradient with respect to the logits.
fn loss_and_delta(logits: &Array2<f64>, targets: &Targets, kind: LossKind) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows() as f64;
    match (kind, targets) {
        (LossKind::CrossEntropyClamped, Targets::Classes(labels)) => {
            let mut delta = softmax_rows(logits);
            let mut total = 0.0;
            for (i, (&y, mut row)) in labels.iter().zip(delta.rows_mut()).enumerate() {
                if y >= row.len() {
                    return Err(invalid(format!("label {y} at sample {i} exceeds class count")));
                }
                let py = row[y];
                let l = -py.max(CE_PROB_FLOOR).ln();
                if !l.is_finite() || row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteLoss { sample: i });
                }
                total += l;
                if py < CE_PROB_FLOOR {
                    // clamped: the loss is locally constant
                    row.fill(0.0);
                } else {
                    row[y] -= 1.0;
                    row.mapv_inplace(|v| v / n);
                }
            }
            Ok((total / n, delta))
        }
        (LossKind::SquaredError, Targets::Values(values)) => {
            if values.dim() != logits.dim() {
                return Err(Error::Shape(format!(
                    "targets {:?} vs outputs {:?}",
                    values.dim(),
                    logits.dim()
                )));
            }
            let diff = logits - values;
            let mut total = 0.0;
            for (i, row) in diff.rows().into_iter().enumerate() {
                let l = 0.5 * row.dot(&row);
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { sample: i });
                }
                total += l;
            }
            Ok((total / n, diff / n))
        }
        _ => Err(invalid("loss kind does not match the target type")),
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Range<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| s..(s + EVAL_CHUNK).min(n))
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// 0-1 error of the network with effective weights `eff`.
pub fn error_rate_effective(net: &DenseNet, batch: &Batch, eff: &[f64]) -> Result<f64> {
    let labels = batch.labels().ok_or_else(|| invalid("0-1 error needs class labels"))?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut wrong = 0usize;
    for range in chunks(labels.len()) {
        let logits = net.forward_effective(batch.inputs.slice(s![range.clone(), ..]), eff);
        wrong += logits
            .rows()
            .into_iter()
            .zip(&labels[range])
            .filter(|(row, &y)| argmax(row.view()) != y)
            .count();
    }
    Ok(wrong as f64 / labels.len() as f64)
}

/// Argmax mismatch rate; ties resolve to the lowest class index.
pub fn eval_01(net: &DenseNet, batch: &Batch, mask: Option<&[f64]>) -> Result<f64> {
    net.check_inputs(&batch.inputs.view())?;
    let eff = net.effective_weights(mask)?;
    error_rate_effective(net, batch, &eff)
}

/// Mean clamped cross-entropy with effective weights `eff`.
pub fn ce_clamped_effective(net: &DenseNet, batch: &Batch, eff: &[f64]) -> Result<f64> {
    let labels = batch.labels().ok_or_else(|| invalid("cross-entropy needs class labels"))?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for range in chunks(labels.len()) {
        let logits = net.forward_effective(batch.inputs.slice(s![range.clone(), ..]), eff);
        total += clamped_ce_per_sample(&logits, &labels[range.clone()])
            .map_err(|e| match e {
                Error::NonFiniteLoss { sample } => Error::NonFiniteLoss {
                    sample: sample + range.start,
                },
                other => other,
            })?
            .sum();
    }
    Ok(total / labels.len() as f64)
}

/// Mean clamped cross-entropy, bounded by `ln(1e4)`.
pub fn eval_ce_clamped(net: &DenseNet, batch: &Batch, mask: Option<&[f64]>) -> Result<f64> {
    net.check_inputs(&batch.inputs.view())?;
    let eff = net.effective_weights(mask)?;
    ce_clamped_effective(net, batch, &eff)
}

/// Clamped cross-entropy divided by `ln(1e4)`, in `[0, 1]`.
pub fn eval_ce_normalized(net: &DenseNet, batch: &Batch, mask: Option<&[f64]>) -> Result<f64> {
    Ok(eval_ce_clamped(net, batch, mask)? / ce_clamp_ceiling())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 128,
            epochs: 10,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be positive"));
        }
        Ok(())
    }
}

/// Heavy-ball momentum: `v <- m v + g; p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(len: usize) -> Self {
        Self {
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
        debug_assert_eq!(params.len(), grad.len());
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Mini-batch row indices for one epoch, shuffled by `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StreamKey::new(seed, Purpose::Shuffle).at_step(epoch as u64).rng();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub net: DenseNet,
    /// Mean mini-batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch SGD with momentum; masked weights receive zero gradient.
pub fn train(
    net: &DenseNet,
    data: &Batch,
    cfg: &SgdConfig,
    mask: Option<&[f64]>,
    loss: LossKind,
) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = net.clone();
    let mut vw = Momentum::new(net.num_weights());
    let mut vb = Momentum::new(net.num_biases());
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        for rows in &batches {
            let mb = data.select(rows);
            let g = net.backward(&mb, mask, loss).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::Diverged { epoch },
                other => other,
            })?;
            sgd_update(&mut net, &mut vw, &mut vb, &g, cfg);
            total += g.loss;
        }
        let mean = total / batches.len() as f64;
        if !mean.is_finite() || net.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        trace.push(mean);
    }
    Ok(Trained { net, loss_trace: trace })
}

pub(crate) fn sgd_update(net: &mut DenseNet, vw: &mut Momentum, vb: &mut Momentum, g: &Gradients, cfg: &SgdConfig) {
    vw.step(&mut net.weights, &g.weights, cfg.learning_rate, cfg.momentum);
    vb.step(&mut net.biases, &g.biases, cfg.learning_rate, cfg.momentum);
}

/// Whole-dataset loss without mini-batching, for traces and checks.
pub fn full_loss(net: &DenseNet, data: &Batch, mask: Option<&[f64]>, loss: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for range in chunks(data.len()) {
        let part = data.slice_rows(range.clone());
        total += net.backward(&part, mask, loss)?.loss * part.len() as f64;
    }
    Ok(total / data.len() as f64)
}
