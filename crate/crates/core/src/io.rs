//! On-disk formats.
//!
//! Binary containers share one layout: a 4-byte magic, a little-endian
//! `u32` JSON header length, the UTF-8 JSON header, then a payload of
//! little-endian values.
//!
//! | magic  | payload                                   |
//! |--------|-------------------------------------------|
//! | `SPCK` | network weights then biases (`f64`)       |
//! | `SPMD` | mask raw parameters (`f64`)               |
//! | `SPBM` | bit-packed binary mask, LSB first         |
//! | `SPSS` | spike-and-slab: lambda, mean, sigma (`f64`) |
//!
//! Linear instances use a whitespace-delimited text format whose first line
//! is `M N-M d D`, followed by `M` prior rows and `N-M` held-out rows, each
//! holding `d` inputs and the label.

use std::fmt::Write as _;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use nalgebra::{DMatrix, DVector};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::bounds::{Sigma, SpikeSlab};
use crate::error::{FormatError, Result};
use crate::linear::LinearInstance;
use crate::masks::{BinaryMask, MaskDistribution, ParamMode};
use crate::nn::{Activation, DenseNet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
pub const MASK_DIST_MAGIC: &[u8; 4] = b"SPMD";
pub const BINARY_MASK_MAGIC: &[u8; 4] = b"SPBM";
pub const SPIKE_SLAB_MAGIC: &[u8; 4] = b"SPSS";

/// Headers larger than this are rejected before allocation.
const MAX_HEADER: usize = 1 << 20;

fn encode<H: Serialize>(magic: &[u8; 4], header: &H, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("headers serialize");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(magic);
    let mut len = [0u8; 4];
    LittleEndian::write_u32(&mut len, json.len() as u32);
    out.extend_from_slice(&len);
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

fn decode<'a, H: DeserializeOwned>(
    format: &'static str,
    magic: &[u8; 4],
    bytes: &'a [u8],
) -> Result<(H, &'a [u8]), FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::new(format, "file shorter than its fixed header"));
    }
    if &bytes[..4] != magic {
        return Err(FormatError::new(format, format!("bad magic {:?}", &bytes[..4])));
    }
    let len = LittleEndian::read_u32(&bytes[4..8]) as usize;
    if len > MAX_HEADER || bytes.len() - 8 < len {
        return Err(FormatError::new(format, format!("header length {len} exceeds file")));
    }
    let header = serde_json::from_slice(&bytes[8..8 + len])
        .map_err(|e| FormatError::new(format, format!("header: {e}")))?;
    Ok((header, &bytes[8 + len..]))
}

fn f64s_to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f64s(format: &'static str, bytes: &[u8], expected: usize) -> Result<Vec<f64>, FormatError> {
    if Some(bytes.len()) != expected.checked_mul(8) {
        return Err(FormatError::new(
            format,
            format!("payload has {} bytes, expected {expected} values", bytes.len()),
        ));
    }
    let mut out = vec![0.0; expected];
    LittleEndian::read_f64_into(bytes, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    /// Free-form echo of the producing configuration.
    pub config: serde_json::Value,
    pub num_weights: usize,
    pub num_biases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: DenseNet,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            layer_dims: self.net.layer_dims().to_vec(),
            activation: self.net.activation(),
            seed: self.seed,
            config: self.config.clone(),
            num_weights: self.net.num_weights(),
            num_biases: self.net.num_biases(),
        };
        let payload = f64s_to_bytes(self.net.weights().iter().chain(self.net.biases()).copied());
        encode(CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const F: &str = "checkpoint";
        let (h, payload): (CheckpointHeader, _) = decode(F, CHECKPOINT_MAGIC, bytes)?;
        let total = h
            .num_weights
            .checked_add(h.num_biases)
            .ok_or_else(|| FormatError::new(F, "parameter count overflows"))?;
        if DenseNet::param_counts(&h.layer_dims) != Some((h.num_weights, h.num_biases)) {
            return Err(FormatError::new(F, "parameter counts disagree with layer_dims").into());
        }
        let values = bytes_to_f64s(F, payload, total)?;
        let (w, b) = values.split_at(h.num_weights);
        let net = DenseNet::from_parts(&h.layer_dims, h.activation, w.to_vec(), b.to_vec())
            .map_err(|e| FormatError::new(F, e.to_string()))?;
        Ok(Self {
            net,
            seed: h.seed,
            config: h.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskDistHeader {
    mode: ParamMode,
    beta: f64,
    d: usize,
}

/// Stores the raw parameters so the mapped probabilities reload exactly.
pub fn mask_distribution_to_bytes(dist: &MaskDistribution) -> Vec<u8> {
    let header = MaskDistHeader {
        mode: dist.mode(),
        beta: dist.beta(),
        d: dist.len(),
    };
    encode(MASK_DIST_MAGIC, &header, &f64s_to_bytes(dist.raw().iter().copied()))
}

pub fn mask_distribution_from_bytes(bytes: &[u8]) -> Result<MaskDistribution> {
    const F: &str = "mask distribution";
    let (h, payload): (MaskDistHeader, _) = decode(F, MASK_DIST_MAGIC, bytes)?;
    let raw = bytes_to_f64s(F, payload, h.d)?;
    MaskDistribution::from_raw(raw, h.mode, h.beta).map_err(|e| FormatError::new(F, e.to_string()).into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BinaryMaskHeader {
    d: usize,
}

pub fn binary_mask_to_bytes(mask: &BinaryMask) -> Vec<u8> {
    encode(BINARY_MASK_MAGIC, &BinaryMaskHeader { d: mask.len() }, &mask.pack())
}

pub fn binary_mask_from_bytes(bytes: &[u8]) -> Result<BinaryMask> {
    const F: &str = "binary mask";
    let (h, payload): (BinaryMaskHeader, _) = decode(F, BINARY_MASK_MAGIC, bytes)?;
    BinaryMask::unpack(payload, h.d).map_err(|e| FormatError::new(F, e.to_string()).into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpikeSlabHeader {
    d: usize,
    /// One sigma per weight, otherwise a single shared value.
    per_weight_sigma: bool,
}

pub fn spike_slab_to_bytes(q: &SpikeSlab) -> Vec<u8> {
    let header = SpikeSlabHeader {
        d: q.len(),
        per_weight_sigma: matches!(q.sigma, Sigma::PerWeight(_)),
    };
    let sigma: Vec<f64> = match &q.sigma {
        Sigma::Scalar(s) => vec![*s],
        Sigma::PerWeight(v) => v.clone(),
    };
    let values = q.lambda.iter().chain(&q.mean).chain(&sigma).copied();
    encode(SPIKE_SLAB_MAGIC, &header, &f64s_to_bytes(values))
}

pub fn spike_slab_from_bytes(bytes: &[u8]) -> Result<SpikeSlab> {
    const F: &str = "spike-slab";
    let (h, payload): (SpikeSlabHeader, _) = decode(F, SPIKE_SLAB_MAGIC, bytes)?;
    let n_sigma = if h.per_weight_sigma { h.d } else { 1 };
    let total = h
        .d
        .checked_mul(2)
        .and_then(|v| v.checked_add(n_sigma))
        .ok_or_else(|| FormatError::new(F, "length overflows"))?;
    let mut values = bytes_to_f64s(F, payload, total)?;
    let sigma = values.split_off(2 * h.d);
    let mean = values.split_off(h.d);
    let sigma = if h.per_weight_sigma { Sigma::PerWeight(sigma) } else { Sigma::Scalar(sigma[0]) };
    SpikeSlab::new(values, mean, sigma).map_err(|e| FormatError::new(F, e.to_string()).into())
}

/// Writes the raw inputs of both splits; the feature map is refitted on load.
pub fn linear_to_text(inst: &LinearInstance) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {} {}", inst.m(), inst.n_bar(), inst.d_in(), inst.d());
    for (x, y) in [(&inst.x_p, &inst.y_p), (&inst.x_pbar, &inst.y_pbar)] {
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let _ = write!(out, "{:e} ", x[(r, c)]);
            }
            let _ = writeln!(out, "{:e}", y[r]);
        }
    }
    out
}

/// Parses [`linear_to_text`] output. Only the centered identity map
/// (`D = d`) is supported.
pub fn linear_from_text(text: &str) -> Result<LinearInstance> {
    const F: &str = "linear instance";
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let head = lines.next().ok_or_else(|| FormatError::new(F, "missing header"))?;
    let dims: Vec<usize> = head
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| FormatError::new(F, format!("bad header field {t:?}"))))
        .collect::<Result<_, _>>()?;
    let [m, n_bar, d, big_d] = dims[..] else {
        return Err(FormatError::new(F, "header must hold M N-M d D").into());
    };
    if d != big_d {
        return Err(FormatError::new(F, "only the identity feature map (D = d) is stored").into());
    }
    let width = d.checked_add(1).ok_or_else(|| FormatError::new(F, "dimension overflows"))?;
    let mut read_rows = |count: usize| -> Result<(DMatrix<f64>, DVector<f64>), FormatError> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| FormatError::new(F, format!("expected {count} rows, found {r}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| FormatError::new(F, format!("bad number {t:?}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != width {
                return Err(FormatError::new(F, format!("row has {} values, expected {width}", vals.len())));
            }
            xs.extend_from_slice(&vals[..d]);
            ys.push(vals[d]);
        }
        Ok((DMatrix::from_row_slice(count, d, &xs), DVector::from_vec(ys)))
    };
    let (x_p, y_p) = read_rows(m)?;
    let (x_pbar, y_pbar) = read_rows(n_bar)?;
    if lines.next().is_some() {
        return Err(FormatError::new(F, "trailing rows after the declared counts").into());
    }
    LinearInstance::new(x_p, y_p, x_pbar, y_pbar).map_err(|e| FormatError::new(F, e.to_string()).into())
}

/// A CSV table with a one-line header.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: ToString>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(|c| c.to_string()).collect();
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 cells"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Column values parsed as floats.
    pub fn column_f64(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r[j].parse().ok()).collect()
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    std::io::Error::other(e.to_string()).into()
}
