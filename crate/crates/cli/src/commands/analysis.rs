//! `linear`, `entropy` and `oracle-grad`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use serde_json::json;
use stochprune::criteria::score_random;
use stochprune::data::synth_classify;
use stochprune::io::{mask_distribution_from_bytes, Table};
use stochprune::masks::{binary_entropy, init_block_isotropic, init_isotropic, mask_entropy};
use stochprune::nn::{Activation, DenseNet};
use stochprune::pipelines::{
    linear_suite, oracle_report, probability_histogram, Check, LinearSuiteConfig, RunRecord, EXACT_MAX_DIM,
};
use stochprune::rng::{derive_seed, Purpose, StreamKey};

use super::Ctx;
use crate::inputs::layer_dims;
use crate::settings::{key, Key, Settings};

pub const LINEAR_KEYS: &[Key] = &[
    key("seed", "0", "seed of the random instances"),
    key("d", "5", "feature dimension (at most 15)"),
    key("instances", "100", "random instances for the identity checks"),
    key("ode_instances", "50", "scalar instances for the gradient-flow check"),
];

pub const ENTROPY_KEYS: &[Key] = &[
    key("seed", "0", "seed of the random scores"),
    key("d", "1000", "number of weights"),
    key("sparsities", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,0.95,0.99", "sparsity grid"),
    key("epsilon", "1e-4", "block-isotropic keep probability of low-score weights"),
    key("dist", "", "mask distribution file to summarise"),
    key("bins", "20", "histogram bins for `dist`"),
];

pub const ORACLE_KEYS: &[Key] = &[
    key("seed", "0", "seed of the network, data and keep probabilities"),
    key("input_dim", "3", "input features"),
    key("hidden", "2", "hidden widths separated by '-'"),
    key("n", "64", "examples"),
    key("blob_margin", "2.0", "distance between blob centres"),
    key("betas", "0.01,0.1,0.5", "relaxation temperatures"),
    key("gs_samples", "4000", "relaxed draws per gradient estimate"),
    key("mc_sizes", "100,1000,10000", "draws of the sampled exact estimator"),
    key("mc_repeats", "10", "independent estimates per draw count"),
];

pub fn linear_cmd(s: &Settings, _ctx: &Ctx) -> Result<RunRecord> {
    let cfg = LinearSuiteConfig {
        d: s.get("d")?,
        instances: s.get("instances")?,
        ode_instances: s.get("ode_instances")?,
        seed: s.get("seed")?,
    };
    let suite = linear_suite(&cfg)?;
    let mut rec = RunRecord::new("linear", s.to_text(), cfg.seed);
    rec.checks = suite.checks.clone();
    let mut diag = Table::new(["name", "value", "note"]);
    for d in &suite.diagnostics {
        diag.push([d.name.clone(), d.value.to_string(), d.note.clone()]);
    }
    let mut ode = Table::new(["lambda0", "eta", "lambda_inf_closed_form", "lambda_inf_euler", "euler_steps"]);
    for r in &suite.ode {
        ode.push([r.lambda0.to_string(), r.eta.to_string(), r.closed_form.to_string(), r.euler.to_string(), r.steps.to_string()]);
    }
    let mut slopes = Table::new(["lambda0", "regime", "log_log_slope", "expected_slope"]);
    for r in &suite.slopes {
        slopes.push([r.lambda0.to_string(), r.regime.clone(), r.slope.to_string(), r.expected.to_string()]);
    }
    rec.tables.push(("diagnostics".into(), diag));
    rec.tables.push(("gradient_flow".into(), ode));
    rec.tables.push(("drift_slopes".into(), slopes));
    rec.report = serde_json::to_value(&suite)?;
    Ok(rec)
}

pub fn entropy_cmd(s: &Settings, _ctx: &Ctx) -> Result<RunRecord> {
    let seed: u64 = s.get("seed")?;
    let d: usize = s.get("d")?;
    let eps: f64 = s.get("epsilon")?;
    let sparsities: Vec<f64> = s.grid("sparsities")?;
    let scores = score_random(d, derive_seed(seed, 1));
    let mut rec = RunRecord::new("entropy", s.to_text(), seed);
    let mut t = Table::new([
        "sparsity",
        "isotropic_bits_per_weight",
        "block_isotropic_bits_per_weight",
        "block_isotropic_expected_sparsity",
    ]);
    let (mut iso_gap, mut jensen_ok) = (0.0f64, true);
    for &sp in &sparsities {
        let iso = mask_entropy(&init_isotropic(d, sp)?.lambda());
        iso_gap = iso_gap.max((iso - binary_entropy(1.0 - sp)).abs());
        let (block, block_sparsity) = if sp < 1.0 {
            let dist = init_block_isotropic(&scores, sp, eps)?;
            let lambda = dist.lambda();
            let h = mask_entropy(&lambda);
            let mean = lambda.iter().sum::<f64>() / d.max(1) as f64;
            jensen_ok &= h <= binary_entropy(mean) + 1e-12;
            (h.to_string(), dist.expected_sparsity().to_string())
        } else {
            (String::new(), String::new())
        };
        t.push([sp.to_string(), iso.to_string(), block, block_sparsity]);
    }
    rec.checks.push(Check::at_most("isotropic_entropy_matches_binary_entropy", iso_gap, 1e-12));
    rec.checks.push(Check::holds("block_entropy_below_isotropic_at_same_mean", jensen_ok));
    rec.tables.push(("entropy_vs_sparsity".into(), t));

    let mut summary = json!({ "d": d });
    if let Some(path) = s.opt::<String>("dist")? {
        let dist = mask_distribution_from_bytes(&fs::read(Path::new(&path))?)?;
        let lambda = dist.lambda();
        let mut h = Table::new(["bin_lo", "bin_hi", "count"]);
        for (lo, hi, c) in probability_histogram(&lambda, s.get("bins")?) {
            h.push([lo.to_string(), hi.to_string(), c.to_string()]);
        }
        rec.tables.push(("keep_probability_histogram".into(), h));
        let e = mask_entropy(&lambda);
        rec.checks.push(Check::holds("distribution_entropy_in_unit_interval", (0.0..=1.0).contains(&e)));
        summary = json!({
            "d": d,
            "dist": { "weights": lambda.len(), "bits_per_weight": e, "expected_sparsity": dist.expected_sparsity() }
        });
    }
    rec.report = summary;
    Ok(rec)
}

pub fn oracle_cmd(s: &Settings, _ctx: &Ctx) -> Result<RunRecord> {
    let seed: u64 = s.get("seed")?;
    let input_dim: usize = s.get("input_dim")?;
    let data = synth_classify(input_dim, 2, s.get("n")?, s.get("blob_margin")?, derive_seed(seed, 1))?;
    let dims = layer_dims(s, input_dim, 2)?;
    let net = DenseNet::init_he_uniform(&dims, Activation::Relu, derive_seed(seed, 2))?;
    let d = net.num_weights();
    if d > EXACT_MAX_DIM {
        bail!("exact enumeration supports at most {EXACT_MAX_DIM} weights, architecture {dims:?} has {d}");
    }
    let mut u = StreamKey::new(derive_seed(seed, 3), Purpose::Init).weights_from(0);
    let lambda: Vec<f64> = (0..d).map(|_| 0.2 + 0.6 * u.next_weight()[0]).collect();
    let betas: Vec<f64> = s.list("betas")?;
    let mc_sizes: Vec<usize> = s.list("mc_sizes")?;
    let rep = oracle_report(&net, &data.dataset.to_batch(), &lambda, &betas, s.get("gs_samples")?, &mc_sizes, s.get("mc_repeats")?, derive_seed(seed, 4))?;

    let mut rec = RunRecord::new("oracle-grad", s.to_text(), seed);
    rec.checks.push(Check::holds("exact_gradient_finite", rep.exact.iter().all(|g| g.is_finite())));
    if mc_sizes.len() >= 2 {
        // Root-mean-square error of an unbiased average shrinks as m^(-1/2).
        rec.checks.push(Check::near("monte_carlo_error_slope", rep.mc_slope, -0.5, 0.2));
    }
    let mut header = vec!["index".to_string(), "lambda".into(), "exact".into()];
    header.extend(rep.gs_by_beta.iter().map(|(b, _, _)| format!("relaxed_beta_{b}")));
    let mut grads = Table::new(header);
    for i in 0..d {
        let mut row = vec![i.to_string(), lambda[i].to_string(), rep.exact[i].to_string()];
        row.extend(rep.gs_by_beta.iter().map(|(_, g, _)| g[i].to_string()));
        grads.push(row);
    }
    let mut agree = Table::new(["beta", "sign_agreement_frac", "pearson", "max_abs_gap"]);
    for (b, _, a) in &rep.gs_by_beta {
        agree.push([b.to_string(), a.sign_agreement.to_string(), a.correlation.to_string(), a.max_abs_gap.to_string()]);
    }
    let mut mc = Table::new(["samples", "rms_error", "undetermined_estimates"]);
    for r in &rep.monte_carlo {
        mc.push([r.samples.to_string(), r.rms_error.to_string(), r.missing.to_string()]);
    }
    rec.tables.push(("gradients".into(), grads));
    rec.tables.push(("relaxed_agreement".into(), agree));
    rec.tables.push(("monte_carlo".into(), mc));
    rec.report = json!({
        "dim": rep.dim,
        "layer_dims": dims,
        "mc_slope": rep.mc_slope,
        "agreement": rep.gs_by_beta.iter().map(|(b, _, a)| json!({ "beta": b, "agreement": a })).collect::<Vec<_>>(),
    });
    Ok(rec)
}
