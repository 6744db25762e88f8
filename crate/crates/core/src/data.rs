//! Datasets: IDX image containers, standardization, seeded splits and
//! synthetic generators with known distributions.

use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, IdxError, Result};
use crate::linear::LinearInstance;
use crate::nn::Batch;
use crate::rng::{std_normal, Purpose, StreamKey};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature standard deviations are floored here before dividing.
pub const STD_FLOOR: f64 = 1e-8;

/// Decompressed IDX payloads larger than this are rejected.
pub const MAX_IDX_BYTES: u64 = 1 << 31;

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "STOCHPRUNE_DATA";

/// A parsed rank-3 unsigned-byte IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; 16];
        BigEndian::write_u32(&mut out[0..4], IDX_IMAGES_MAGIC);
        BigEndian::write_u32(&mut out[4..8], self.count as u32);
        BigEndian::write_u32(&mut out[8..12], self.rows as u32);
        BigEndian::write_u32(&mut out[12..16], self.cols as u32);
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Inflates gzip input, passes anything else through.
pub fn maybe_gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes).take(MAX_IDX_BYTES + 1).read_to_end(&mut out)?;
        if out.len() as u64 > MAX_IDX_BYTES {
            return Err(IdxError::Dimensions("decompressed payload too large".into()).into());
        }
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<(Vec<usize>, usize), IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            needed: 4,
            found: bytes.len(),
        });
    }
    let found = BigEndian::read_u32(&bytes[0..4]);
    if found != magic {
        return Err(IdxError::BadMagic { expected: magic, found });
    }
    let head = 4 + 4 * dims;
    if bytes.len() < head {
        return Err(IdxError::Truncated {
            needed: head,
            found: bytes.len(),
        });
    }
    let sizes = (0..dims)
        .map(|k| BigEndian::read_u32(&bytes[4 + 4 * k..8 + 4 * k]) as usize)
        .collect::<Vec<_>>();
    let payload = sizes
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| IdxError::Dimensions(format!("{sizes:?} overflows")))?;
    let needed = head
        .checked_add(payload)
        .ok_or_else(|| IdxError::Dimensions(format!("{sizes:?} overflows")))?;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(IdxError::Dimensions(format!(
            "{} trailing bytes after payload",
            bytes.len() - needed
        )));
    }
    Ok((sizes, head))
}

/// Parses an uncompressed image container (magic `0x00000803`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let (sizes, head) = header(bytes, IDX_IMAGES_MAGIC, 3)?;
    Ok(IdxImages {
        count: sizes[0],
        rows: sizes[1],
        cols: sizes[2],
        pixels: bytes[head..].to_vec(),
    })
}

/// Parses an uncompressed label container (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let (_, head) = header(bytes, IDX_LABELS_MAGIC, 1)?;
    Ok(bytes[head..].to_vec())
}

pub fn labels_to_idx(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; 8];
    BigEndian::write_u32(&mut out[0..4], IDX_LABELS_MAGIC);
    BigEndian::write_u32(&mut out[4..8], labels.len() as u32);
    out.extend_from_slice(labels);
    out
}

/// Per-feature affine map fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(inputs: &Array2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mean = inputs.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = inputs
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|s| s.max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, inputs: &mut Array2<f64>) -> Result<()> {
        if inputs.ncols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "{} features, standardization fitted on {}",
                inputs.ncols(),
                self.mean.len()
            )));
        }
        for mut row in inputs.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// SHA-256 of the source bytes (or of the generator parameters).
    pub source_hash: String,
    pub source: String,
    pub standardization: Option<Standardization>,
    /// Set when only the first `n` examples after a seeded shuffle were kept.
    pub subset: Option<SubsetInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetInfo {
    pub n: usize,
    pub seed: u64,
}

/// Labelled examples (rows) with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", inputs.nrows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            meta: DatasetMeta::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn to_batch(&self) -> Batch {
        Batch::classification(self.inputs.clone(), self.labels.clone()).expect("rows match labels")
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
            meta: self.meta.clone(),
        }
    }

    /// Fits standardization here and applies it to `self` and `others`.
    pub fn standardize_with(&mut self, others: &mut [&mut Dataset]) -> Result<Standardization> {
        let st = Standardization::fit(&self.inputs)?;
        st.apply(&mut self.inputs)?;
        self.meta.standardization = Some(st.clone());
        for o in others.iter_mut() {
            st.apply(&mut o.inputs)?;
            o.meta.standardization = Some(st.clone());
        }
        Ok(st)
    }

    /// Keeps the first `n` examples after a seeded shuffle.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut StreamKey::new(seed, Purpose::Split).at_step(1).rng());
        idx.truncate(n.min(self.len()));
        let mut out = self.select(&idx);
        out.meta.subset = Some(SubsetInfo { n: out.len(), seed });
        out
    }
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Decodes an image/label pair, scaling pixels to `[0, 1]`.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let images = maybe_gunzip(images)?;
    let labels = maybe_gunzip(labels)?;
    let hash = sha256_hex(&[&images, &labels]);
    let img = parse_idx_images(&images)?;
    let lab = parse_idx_labels(&labels)?;
    if img.count != lab.len() {
        return Err(IdxError::CountMismatch {
            images: img.count,
            labels: lab.len(),
        }
        .into());
    }
    let features = img.rows * img.cols;
    let inputs = Array2::from_shape_fn((img.count, features), |(r, c)| img.pixels[r * features + c] as f64 / 255.0);
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(10);
    let mut ds = Dataset::new(inputs, labels, classes)?;
    ds.meta.source_hash = hash;
    Ok(ds)
}

/// Reads an IDX image/label pair from disk; gzip is detected from content.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    let mut ds = dataset_from_idx(&images, &labels)?;
    ds.meta.source = images_path.display().to_string();
    Ok(ds)
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )
    .into())
}

/// Loads the standard train/test file names from `dir` and standardizes
/// both with statistics of the training split.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = load_idx(
        &find_file(dir, "train-images-idx3-ubyte")?,
        &find_file(dir, "train-labels-idx1-ubyte")?,
    )?;
    let mut test = load_idx(
        &find_file(dir, "t10k-images-idx3-ubyte")?,
        &find_file(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    train.standardize_with(&mut [&mut test])?;
    Ok((train, test))
}

/// Index sets for the prior split `S_P` and the held-out split `S \ S_P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub alpha: f64,
    pub seed: u64,
    pub prior: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl SplitSpec {
    pub fn n_total(&self) -> usize {
        self.prior.len() + self.held_out.len()
    }
}

/// Seeded permutation, then the first `round(alpha n)` indices form `S_P`.
pub fn split(n: usize, alpha: f64, seed: u64) -> Result<SplitSpec> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut StreamKey::new(seed, Purpose::Split).rng());
    let k = (alpha * n as f64).round() as usize;
    let held_out = idx.split_off(k.min(n));
    Ok(SplitSpec {
        alpha,
        seed,
        prior: idx,
        held_out,
    })
}

/// Which stage of a self-bounded pipeline is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// May read `S_P` only.
    Prior,
    /// May read both splits.
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub stage: Stage,
    pub split: String,
    pub granted: bool,
}

/// Both halves of a split with an access log. Held-out data cannot be read
/// while the stage is [`Stage::Prior`].
#[derive(Debug, Clone)]
pub struct AuditedSplit {
    spec: SplitSpec,
    prior: Dataset,
    held_out: Dataset,
    stage: Stage,
    log: Vec<AccessRecord>,
}

impl AuditedSplit {
    pub fn new(data: &Dataset, spec: SplitSpec) -> Result<Self> {
        if spec.n_total() != data.len() {
            return Err(Error::Shape(format!(
                "split covers {} examples, dataset has {}",
                spec.n_total(),
                data.len()
            )));
        }
        Ok(Self {
            prior: data.select(&spec.prior),
            held_out: data.select(&spec.held_out),
            spec,
            stage: Stage::Prior,
            log: Vec::new(),
        })
    }

    pub fn spec(&self) -> &SplitSpec {
        &self.spec
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Irreversibly allows held-out access.
    pub fn enter_posterior_stage(&mut self) {
        self.stage = Stage::Posterior;
    }

    pub fn prior(&mut self) -> &Dataset {
        self.log.push(AccessRecord {
            stage: self.stage,
            split: "prior".into(),
            granted: true,
        });
        &self.prior
    }

    pub fn held_out(&mut self) -> Result<&Dataset> {
        let granted = self.stage == Stage::Posterior;
        self.log.push(AccessRecord {
            stage: self.stage,
            split: "held_out".into(),
            granted,
        });
        if granted {
            Ok(&self.held_out)
        } else {
            Err(Error::SplitAccess)
        }
    }

    pub fn log(&self) -> &[AccessRecord] {
        &self.log
    }

    /// True when no prior-stage request touched the held-out split.
    pub fn audit_clean(&self) -> bool {
        !self
            .log
            .iter()
            .any(|r| r.stage == Stage::Prior && r.split == "held_out")
    }
}

/// Input covariance for [`synth_linear`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSpec {
    Identity,
    Diagonal(Vec<f64>),
    /// Unit variances with a single correlated pair.
    Pair { i: usize, j: usize, rho: f64 },
}

impl CovarianceSpec {
    pub fn matrix(&self, d: usize) -> Result<DMatrix<f64>> {
        match self {
            CovarianceSpec::Identity => Ok(DMatrix::identity(d, d)),
            CovarianceSpec::Diagonal(v) => {
                if v.len() != d || v.iter().any(|&x| !(x > 0.0)) {
                    return Err(invalid("diagonal covariance needs d positive entries"));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(v)))
            }
            &CovarianceSpec::Pair { i, j, rho } => {
                if i >= d || j >= d || i == j || !(rho.abs() < 1.0) {
                    return Err(invalid("pair covariance needs distinct indices below d and |rho| < 1"));
                }
                let mut m = DMatrix::identity(d, d);
                m[(i, j)] = rho;
                m[(j, i)] = rho;
                Ok(m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthLinear {
    pub instance: LinearInstance,
    pub w_star: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Gaussian design, `y = x^T w* + noise`; the first `m` rows form `S_P`.
pub fn synth_linear(
    d: usize,
    feature_dim: usize,
    m: usize,
    n: usize,
    noise_sigma: f64,
    cov: &CovarianceSpec,
    seed: u64,
) -> Result<SynthLinear> {
    if feature_dim != d {
        return Err(invalid(format!(
            "identity feature map needs D = d, got D = {feature_dim}, d = {d}"
        )));
    }
    if m == 0 || m > n || d == 0 {
        return Err(invalid(format!("need 0 < M <= N and d > 0, got M = {m}, N = {n}, d = {d}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(invalid("noise sigma must be non-negative"));
    }
    let sigma = cov.matrix(d)?;
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut rng = StreamKey::new(seed, Purpose::Synth).rng();
    let mut normal = || std_normal(rng.gen::<f64>().max(f64::MIN_POSITIVE), rng.gen::<f64>());
    let w_star = DVector::from_fn(d, |_, _| normal());
    let z = DMatrix::from_fn(n, d, |_, _| normal());
    let x = z * l.transpose();
    let noise = DVector::from_fn(n, |_, _| noise_sigma * normal());
    let y = &x * &w_star + noise;
    let x_p = x.rows(0, m).into_owned();
    let y_p = y.rows(0, m).into_owned();
    let x_pbar = x.rows(m, n - m).into_owned();
    let y_pbar = y.rows(m, n - m).into_owned();
    Ok(SynthLinear {
        instance: LinearInstance::new(x_p, y_p, x_pbar, y_pbar)?,
        w_star,
        covariance: sigma,
    })
}

/// Isotropic Gaussian class blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobGenerator {
    pub d: usize,
    pub classes: usize,
    pub margin: f64,
    /// Class means, row per class.
    pub means: Vec<Vec<f64>>,
}

impl BlobGenerator {
    /// Two classes sit at `+-margin/2` on the first axis; more classes sit on
    /// orthogonal axes, all pairwise `margin` apart.
    pub fn new(d: usize, classes: usize, margin: f64) -> Result<Self> {
        if classes < 2 || d == 0 {
            return Err(invalid("need at least two classes and one feature"));
        }
        if classes > 2 && classes > d {
            return Err(invalid(format!("{classes} orthogonal class means need d >= {classes}")));
        }
        if !(margin >= 0.0) {
            return Err(invalid("margin must be non-negative"));
        }
        let means = (0..classes)
            .map(|k| {
                let mut mu = vec![0.0; d];
                if classes == 2 {
                    mu[0] = if k == 0 { -margin / 2.0 } else { margin / 2.0 };
                } else {
                    mu[k] = margin / std::f64::consts::SQRT_2;
                }
                mu
            })
            .collect();
        Ok(Self {
            d,
            classes,
            margin,
            means,
        })
    }

    /// Draws `n` labelled points; labels are uniform over the classes.
    pub fn sample(&self, n: usize, key: StreamKey) -> Dataset {
        let mut rng = key.rng();
        let mut inputs = Array2::zeros((n, self.d));
        let mut labels = Vec::with_capacity(n);
        for r in 0..n {
            let y = rng.gen_range(0..self.classes);
            for c in 0..self.d {
                let z = std_normal(rng.gen::<f64>().max(f64::MIN_POSITIVE), rng.gen::<f64>());
                inputs[(r, c)] = self.means[y][c] + z;
            }
            labels.push(y);
        }
        let mut ds = Dataset::new(inputs, labels, self.classes).expect("labels in range");
        ds.meta.source = format!("blobs(d={}, classes={}, margin={})", self.d, self.classes, self.margin);
        ds.meta.source_hash = sha256_hex(&[
            ds.meta.source.as_bytes(),
            &key.seed().to_le_bytes(),
            &key.step().to_le_bytes(),
        ]);
        ds
    }

    /// `Phi(-margin / 2)` for two classes.
    pub fn bayes_error(&self) -> Option<f64> {
        (self.classes == 2).then(|| 0.5 * libm::erfc(self.margin / (2.0 * std::f64::consts::SQRT_2)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClassify {
    pub dataset: Dataset,
    pub generator: BlobGenerator,
}

pub fn synth_classify(d: usize, classes: usize, n: usize, margin: f64, seed: u64) -> Result<SynthClassify> {
    let generator = BlobGenerator::new(d, classes, margin)?;
    let dataset = generator.sample(n, StreamKey::new(seed, Purpose::Synth));
    Ok(SynthClassify { dataset, generator })
}
