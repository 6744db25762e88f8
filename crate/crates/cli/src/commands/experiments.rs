//! `robustness`, `overlap`, `strong-lth` and `mask-stability`.

use anyhow::Result;
use serde_json::json;
use stochprune::criteria::Criterion;
use stochprune::io::Table;
use stochprune::masks::SparsityTarget;
use stochprune::pipelines::{
    mask_stability, mid_range, overlap_vs_sparsity, robustness_curve, strong_lth, summarize_overlap, train_or_skip, Check,
    RunRecord, StrongLthConfig,
};
use stochprune::rng::derive_seed;

use super::train::{pft_config, pft_one};
use super::Ctx;
use crate::inputs::{fan_out, init_net, load_data, seeds, sgd};
use crate::settings::{key, Key, Settings};

pub const ROBUSTNESS_KEYS: &[Key] = &[
    key("variances", "log10:-3:0:13", "perturbation scales v (list or log10:LO:HI:N)"),
    key("draws", "5", "perturbation draws per scale"),
    key("drop_lo", "0.05", "lower end of the mid-range dense accuracy drop"),
    key("drop_hi", "0.9", "upper end of the mid-range dense accuracy drop"),
];

pub const OVERLAP_KEYS: &[Key] = &[
    key("criteria", "magnitude,snip,random", "scoring criteria"),
    key("sparsities", "0.6,0.8,0.9,0.95,0.99", "sparsity grid"),
];

pub const STRONG_LTH_KEYS: &[Key] = &[
    key("seed", "0", "run seed"),
    key("hidden", "256-256", "hidden widths separated by '-'"),
    key("sparsity", "0.5", "target sparsity"),
    key("criterion", "random", "criterion for the initial distribution"),
    key("init_scheme", "isotropic", "isotropic or block_isotropic"),
    key("epsilon", "1e-4", "block-isotropic keep probability of low-score weights"),
    key("param_mode", "clamp", "clamp or sigmoid"),
    key("beta", "0.5", "relaxation temperature"),
    key("epochs", "100", "mask training epochs"),
    key("mask_lr", "0.5", "mask learning rate"),
    key("batch_size", "128", "mini-batch size"),
    key("samples", "10", "hard masks drawn for evaluation"),
];

pub const STABILITY_KEYS: &[Key] = &[
    key("seed", "0", "seed of the shared initialisation"),
    key("sparsity", "0.9", "magnitude pruning sparsity"),
    key("runs", "5", "retraining runs with different shuffles"),
];

pub fn robustness_cmd(s: &Settings, ctx: &Ctx) -> Result<RunRecord> {
    let data = load_data(s)?;
    let seeds = seeds(s)?;
    let variances = s.grid("variances")?;
    let draws: usize = s.get("draws")?;
    let (lo, hi): (f64, f64) = (s.get("drop_lo")?, s.get("drop_hi")?);
    let test = data.test.to_batch();
    let curves = fan_out(&seeds, ctx.jobs, |&seed| {
        let out = pft_one(s, &data, seed)?;
        let noise = derive_seed(seed, 200);
        let dense = robustness_curve(&out.dense, None, &test, &variances, draws, noise)?;
        let pruned = robustness_curve(&out.sparse_net, Some(&out.masks.hard_mask), &test, &variances, draws, noise)?;
        Ok((dense, pruned))
    })?;

    let mut rec = RunRecord::new("robustness", s.to_text(), seeds[0]);
    rec.data_hash = Some(data.hash.clone());
    let mut t = Table::new([
        "seed",
        "v",
        "dense_test_error",
        "dense_accuracy_drop_frac",
        "pruned_test_error",
        "pruned_accuracy_drop_frac",
        "mid_range",
    ]);
    let (mut mid_total, mut mid_pruned_better, mut valid) = (0usize, 0usize, true);
    for (&seed, (dense, pruned)) in seeds.iter().zip(&curves) {
        let mid = mid_range(dense, lo, hi);
        for (i, (a, b)) in dense.iter().zip(pruned).enumerate() {
            valid &= (0.0..=1.0).contains(&a.error) && (0.0..=1.0).contains(&b.error);
            let in_mid = mid.contains(&i);
            if in_mid {
                mid_total += 1;
                mid_pruned_better += (b.drop <= a.drop) as usize;
            }
            t.push([
                seed.to_string(),
                a.v.to_string(),
                a.error.to_string(),
                a.drop.to_string(),
                b.error.to_string(),
                b.drop.to_string(),
                in_mid.to_string(),
            ]);
        }
    }
    rec.checks.push(Check::holds("errors_in_unit_interval", valid));
    rec.tables.push(("robustness".into(), t));
    rec.report = json!({
        "mid_range_points": mid_total,
        "pruned_drop_at_most_dense_frac": if mid_total > 0 { mid_pruned_better as f64 / mid_total as f64 } else { f64::NAN },
    });
    Ok(rec)
}

pub fn overlap_cmd(s: &Settings, ctx: &Ctx) -> Result<RunRecord> {
    let data = load_data(s)?;
    let seeds = seeds(s)?;
    let criteria: Vec<Criterion> = s.list("criteria")?;
    let sparsities: Vec<f64> = s.grid("sparsities")?;
    let train = data.train.to_batch();
    let per_seed = fan_out(&seeds, ctx.jobs, |&seed| {
        let net = train_or_skip(&init_net(s, &data.train, seed)?, &train, &sgd(s, "epochs", "lr", derive_seed(seed, 0))?, None)?.net;
        Ok(overlap_vs_sparsity(&[(seed, net)], &train, &pft_config(s, seed)?, &criteria, &sparsities)?)
    })?;
    let rows: Vec<_> = per_seed.into_iter().flatten().collect();

    let mut rec = RunRecord::new("overlap", s.to_text(), seeds[0]);
    rec.data_hash = Some(data.hash.clone());
    rec.checks.push(Check::holds("overlap_in_unit_interval", rows.iter().all(|r| (0.0..=1.0).contains(&r.overlap))));
    let mut t = Table::new(["criterion", "sparsity", "seed", "overlap_frac"]);
    for r in &rows {
        t.push([r.criterion.as_str().to_string(), r.sparsity.to_string(), r.seed.to_string(), r.overlap.to_string()]);
    }
    let summary = summarize_overlap(&rows);
    let mut m = Table::new(["criterion", "sparsity", "mean_overlap_frac", "ci95_half_width", "seeds"]);
    for r in &summary {
        m.push([
            r.criterion.as_str().to_string(),
            r.sparsity.to_string(),
            r.overlap.mean.to_string(),
            r.overlap.half_width.to_string(),
            r.overlap.n.to_string(),
        ]);
    }
    rec.tables.push(("overlap".into(), t));
    rec.tables.push(("overlap_summary".into(), m));
    rec.report = json!({ "summary": summary });
    Ok(rec)
}

pub fn strong_lth_cmd(s: &Settings, _ctx: &Ctx) -> Result<RunRecord> {
    let data = load_data(s)?;
    let seed: u64 = s.get("seed")?;
    let cfg = StrongLthConfig {
        sparsity: s.get("sparsity")?,
        criterion: s.get("criterion")?,
        init_scheme: match s.get("init_scheme")? {
            stochprune::pipelines::InitScheme::BlockIsotropic { .. } => {
                stochprune::pipelines::InitScheme::BlockIsotropic { epsilon: s.get("epsilon")? }
            }
            other => other,
        },
        param_mode: s.get("param_mode")?,
        beta: s.get("beta")?,
        epochs: s.get("epochs")?,
        mask_lr: s.get("mask_lr")?,
        batch_size: s.get("batch_size")?,
        samples: s.get("samples")?,
        seed,
    };
    let net = init_net(s, &data.train, seed)?;
    let out = strong_lth(&data.train.to_batch(), &data.test.to_batch(), &net, &cfg)?;

    let mut rec = RunRecord::new("strong-lth", s.to_text(), seed);
    rec.data_hash = Some(data.hash.clone());
    let all_unit = out.untrained_errors.iter().chain(&out.trained_errors).all(|e| (0.0..=1.0).contains(e));
    rec.checks.push(Check::holds("errors_in_unit_interval", all_unit));
    let mut trace = Table::new(["epoch", "loss_nats", "entropy_bits", "expected_sparsity"]);
    for e in &out.trace {
        trace.push([e.epoch.to_string(), e.loss.to_string(), e.entropy.to_string(), e.expected_sparsity.to_string()]);
    }
    let mut errs = Table::new(["draw", "untrained_mask_test_error", "trained_mask_test_error"]);
    for (i, (a, b)) in out.untrained_errors.iter().zip(&out.trained_errors).enumerate() {
        errs.push([i.to_string(), a.to_string(), b.to_string()]);
    }
    rec.tables.push(("mask_training".into(), trace));
    rec.tables.push(("mask_errors".into(), errs));
    rec.report = json!({ "untrained": out.untrained, "trained": out.trained });
    Ok(rec)
}

pub fn mask_stability_cmd(s: &Settings, _ctx: &Ctx) -> Result<RunRecord> {
    let data = load_data(s)?;
    let seed: u64 = s.get("seed")?;
    let runs: u64 = s.get("runs")?;
    let sparsity: f64 = s.get("sparsity")?;
    let net = init_net(s, &data.train, seed)?;
    let shuffles: Vec<u64> = (0..runs).map(|k| derive_seed(seed, 300 + k)).collect();
    let out = mask_stability(&data.train.to_batch(), &net, &sgd(s, "epochs", "lr", 0)?, sparsity, &shuffles)?;

    let mut rec = RunRecord::new("mask-stability", s.to_text(), seed);
    rec.data_hash = Some(data.hash.clone());
    let k = SparsityTarget::new(sparsity)?.keep_count(net.num_weights());
    let kept_total: f64 = out.frequency.iter().sum::<f64>() * runs as f64;
    rec.checks.push(Check::at_most("every_run_keeps_k", (kept_total - (k as u64 * runs) as f64).abs(), 1e-6));
    let mut t = Table::new(["index", "keep_frequency", "mean_abs_weight", "std_abs_weight"]);
    for r in &out.boundary {
        t.push([r.index.to_string(), r.frequency.to_string(), r.mean_abs.to_string(), r.std_abs.to_string()]);
    }
    rec.tables.push(("boundary_weights".into(), t));
    rec.report = json!({
        "num_weights": net.num_weights(),
        "keep_count": k,
        "runs": runs,
        "boundary_fraction": out.boundary_fraction,
    });
    Ok(rec)
}
