//! Data, architecture and seed fan-out shared by the subcommands.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use stochprune::data::{load_mnist_dir, synth_classify, Dataset, DATA_ROOT_ENV};
use stochprune::nn::{Activation, DenseNet, SgdConfig};
use stochprune::rng::{derive_seed, Purpose, StreamKey};

use crate::settings::{key, Key, Settings};

pub const DEFAULT_DATA_DIR: &str = "data/mnist5k";

pub const DATA_KEYS: &[Key] = &[
    key("data", "", "IDX directory or `blobs`; defaults to $STOCHPRUNE_DATA, then data/mnist5k"),
    key("data_seed", "0", "seed for subsetting or generating the data"),
    key("train_size", "0", "training examples to keep (0 = all; blobs default 2000)"),
    key("test_size", "0", "test examples to keep (0 = all; blobs default 10000)"),
    key("blob_dim", "20", "input dimension of the blob generator"),
    key("blob_classes", "2", "classes of the blob generator"),
    key("blob_margin", "1.5", "distance between blob centres"),
];

pub const NET_KEYS: &[Key] = &[
    key("hidden", "256-256", "hidden widths separated by '-' (`none` for a linear model)"),
    key("lr", "0.01", "SGD learning rate"),
    key("momentum", "0.9", "SGD momentum"),
    key("batch_size", "128", "mini-batch size"),
    key("epochs", "10", "dense training epochs"),
];

pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub source: String,
    pub hash: String,
}

pub fn data_dir(s: &Settings) -> PathBuf {
    match s.str("data") {
        "" => std::env::var_os(DATA_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), PathBuf::from),
        other => PathBuf::from(other),
    }
}

pub fn load_data(s: &Settings) -> Result<Data> {
    let data_seed: u64 = s.get("data_seed")?;
    let train_size: usize = s.get("train_size")?;
    let test_size: usize = s.get("test_size")?;
    if s.str("data") == "blobs" {
        let (d, c, margin) = (s.get("blob_dim")?, s.get("blob_classes")?, s.get("blob_margin")?);
        let n_train = if train_size == 0 { 2000 } else { train_size };
        let n_test = if test_size == 0 { 10_000 } else { test_size };
        let synth = synth_classify(d, c, n_train, margin, data_seed)?;
        let test = synth.generator.sample(n_test, StreamKey::new(derive_seed(data_seed, 1), Purpose::Synth));
        let hash = format!("blobs:{d}:{c}:{margin}:{n_train}:{n_test}:{data_seed}");
        return Ok(Data {
            train: synth.dataset,
            test,
            source: "blobs".into(),
            hash,
        });
    }
    let dir = data_dir(s);
    let (mut train, mut test) = load_mnist_dir(&dir).with_context(|| format!("loading data from {}", dir.display()))?;
    let hash = train.meta.source_hash.clone();
    if train_size > 0 {
        train = train.subset(train_size, data_seed);
    }
    if test_size > 0 {
        test = test.subset(test_size, derive_seed(data_seed, 1));
    }
    Ok(Data {
        train,
        test,
        source: dir.display().to_string(),
        hash,
    })
}

pub fn layer_dims(s: &Settings, inputs: usize, classes: usize) -> Result<Vec<usize>> {
    let mut dims = vec![inputs];
    let hidden = s.str("hidden").trim();
    if !(hidden.is_empty() || hidden == "none") {
        for w in hidden.split(['-', ',']) {
            let w: usize = w.trim().parse().with_context(|| format!("bad hidden width {w:?}"))?;
            if w == 0 {
                bail!("hidden widths must be positive");
            }
            dims.push(w);
        }
    }
    dims.push(classes);
    Ok(dims)
}

/// He-uniform initial network for `data`, seeded from the run seed.
pub fn init_net(s: &Settings, data: &Dataset, seed: u64) -> Result<DenseNet> {
    let dims = layer_dims(s, data.num_features(), data.num_classes)?;
    Ok(DenseNet::init_he_uniform(&dims, Activation::Relu, derive_seed(seed, 1000))?)
}

pub fn sgd(s: &Settings, epochs_key: &str, lr_key: &str, seed: u64) -> Result<SgdConfig> {
    Ok(SgdConfig {
        learning_rate: s.get(lr_key)?,
        momentum: s.get("momentum")?,
        batch_size: s.get("batch_size")?,
        epochs: s.get(epochs_key)?,
        seed,
    })
}

/// The run seeds `seed, seed + 1, ...`.
pub fn seeds(s: &Settings) -> Result<Vec<u64>> {
    let base: u64 = s.get("seed")?;
    let n: u64 = s.get("seeds")?;
    if n == 0 {
        bail!("`seeds` must be positive");
    }
    Ok((0..n).map(|k| base + k).collect())
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
pub fn fan_out<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| items.par_iter().map(f).collect())
}
