//! `pretrain`, `pft`, `pbp` and `bound`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use stochprune::bounds::{BoundReport, DeltaSplit};
use stochprune::io::{binary_mask_to_bytes, mask_distribution_to_bytes, spike_slab_from_bytes, spike_slab_to_bytes, Checkpoint, Table};
use stochprune::masks::SparsityTarget;
use stochprune::nn::{eval_01, DenseNet};
use stochprune::pipelines::{
    certificate_seed, certify, pbp, pft, pft_from_dense, Check, InitScheme, PbpConfig, PbpOutput, PftConfig, PftOutput, RunRecord,
};

use super::Ctx;
use crate::inputs::{fan_out, init_net, load_data, seeds, sgd, Data};
use crate::settings::{key, Key, Settings};

pub const PRETRAIN_KEYS: &[Key] = &[key("seed", "0", "run seed")];

pub const PFT_KEYS: &[Key] = &[
    key("seed", "0", "base run seed"),
    key("seeds", "1", "number of consecutive seeds to run"),
    key("checkpoint", "", "pretrained network; skips dense training"),
    key("sparsity", "0.9", "fraction of weights pruned"),
    key("criterion", "magnitude", "magnitude, snip or random"),
    key("init_scheme", "block_isotropic", "isotropic or block_isotropic"),
    key("epsilon", "1e-4", "block-isotropic keep probability of low-score weights"),
    key("param_mode", "clamp", "clamp or sigmoid"),
    key("beta", "0.5", "relaxation temperature"),
    key("stage2_epochs", "10", "relaxed mask training epochs"),
    key("mask_lr", "0.01", "learning rate of the mask parameters"),
    key("optimize_weights", "true", "train weights jointly with the mask"),
    key("masks_per_batch", "1", "relaxed mask draws per mini-batch"),
    key("finetune_epochs", "10", "fine-tuning epochs under the hard mask"),
    key("score_examples", "1024", "examples used for SNIP scores"),
];

pub const PBP_KEYS: &[Key] = &[
    key("seed", "0", "base run seed"),
    key("seeds", "1", "number of consecutive seeds to run"),
    key("alpha", "0.6", "fraction of the data used for the prior"),
    key("sparsity", "0.9", "target sparsity of the prior"),
    key("criterion", "magnitude", "magnitude, snip or random"),
    key("init_scheme", "block_isotropic", "isotropic or block_isotropic"),
    key("epsilon", "1e-4", "block-isotropic keep probability of low-score weights"),
    key("beta", "0.5", "relaxation temperature"),
    key("stage2_epochs", "10", "prior fine-tuning epochs"),
    key("stage2_mask_lr", "0.01", "prior mask learning rate"),
    key("sigma2", "ln:-15:-3:7", "slab variance grid (list or ln:LO:HI:N)"),
    key("train_prior_sigma", "false", "train the prior slab sigma"),
    key("stage3_epochs", "10", "posterior optimisation epochs"),
    key("stage3_lr", "0.01", "posterior mean learning rate"),
    key("stage3_mask_lr", "0.01", "posterior mask learning rate"),
    key("train_posterior_lambda", "true", "train the posterior keep probabilities"),
    key("train_posterior_sigma", "false", "train the posterior slab sigma"),
    key("kl_downweight", "1", "KL weight in the training objective only"),
    key("delta", "0.05", "total confidence budget"),
    key("lambda_floor", "1e-4", "prior keep probabilities are clipped to [floor, 1 - floor]"),
    key("mc_samples", "1000", "Monte Carlo draws of the final certificate"),
    key("select_samples", "20", "Monte Carlo draws when selecting sigma^2"),
    key("test_samples", "20", "Monte Carlo draws for test error"),
    key("score_examples", "1024", "examples used for SNIP scores"),
];

pub const BOUND_KEYS: &[Key] = &[
    key("run", "", "directory of one pbp seed (holds certificate.json)"),
    key("mc_samples", "", "override the number of Monte Carlo draws"),
    key("seed", "", "override the certificate seed"),
];

fn with_seed(s: &Settings, seed: u64) -> Settings {
    let mut out = s.clone();
    out.set("seed", seed);
    out.set("seeds", 1);
    out
}

fn seed_dir(ctx: &Ctx, seed: u64) -> Result<std::path::PathBuf> {
    let d = ctx.out.join(format!("seed-{seed}"));
    fs::create_dir_all(&d)?;
    Ok(d)
}

fn init_scheme(s: &Settings) -> Result<InitScheme> {
    Ok(match s.get::<InitScheme>("init_scheme")? {
        InitScheme::BlockIsotropic { .. } => InitScheme::BlockIsotropic { epsilon: s.get("epsilon")? },
        other => other,
    })
}

fn check_unit(name: &str, v: f64) -> Check {
    Check::holds(name, (0.0..=1.0).contains(&v))
}

pub fn pretrain(s: &Settings, ctx: &Ctx) -> Result<RunRecord> {
    let data = load_data(s)?;
    let seed: u64 = s.get("seed")?;
    let net = init_net(s, &data.train, seed)?;
    let cfg = sgd(s, "epochs", "lr", stochprune::rng::derive_seed(seed, 0))?;
    let trained = stochprune::nn::train(&net, &data.train.to_batch(), &cfg, None, stochprune::nn::LossKind::CrossEntropyClamped)?;
    let test_error = eval_01(&trained.net, &data.test.to_batch(), None)?;
    let train_error = eval_01(&trained.net, &data.train.to_batch(), None)?;
    Checkpoint {
        net: trained.net.clone(),
        seed,
        config: json!({ "command": "pretrain", "settings": s.to_text() }),
    }
    .save(&ctx.out.join("dense.spck"))?;

    let mut rec = RunRecord::new("pretrain", s.to_text(), seed);
    rec.data_hash = Some(data.hash.clone());
    rec.checks.push(Check::holds("loss_trace_finite", trained.loss_trace.iter().all(|l| l.is_finite())));
    rec.checks.push(check_unit("test_error_in_unit_interval", test_error));
    let mut t = Table::new(["epoch", "train_loss_nats"]);
    for (e, l) in trained.loss_trace.iter().enumerate() {
        t.push([e.to_string(), l.to_string()]);
    }
    rec.tables.push(("loss".into(), t));
    rec.report = json!({
        "layer_dims": trained.net.layer_dims(),
        "num_weights": trained.net.num_weights(),
        "train_error": train_error,
        "test_error": test_error,
        "data": data.source,
    });
    Ok(rec)
}

pub fn pft_config(s: &Settings, seed: u64) -> Result<PftConfig> {
    Ok(PftConfig {
        sparsity: s.get("sparsity")?,
        criterion: s.get("criterion")?,
        init_scheme: init_scheme(s)?,
        param_mode: s.get("param_mode")?,
        beta: s.get("beta")?,
        pretrain: sgd(s, "epochs", "lr", 0)?,
        stage2: sgd(s, "stage2_epochs", "lr", 0)?,
        mask_lr: s.get("mask_lr")?,
        optimize_weights: s.get("optimize_weights")?,
        masks_per_batch: s.get("masks_per_batch")?,
        finetune: sgd(s, "finetune_epochs", "lr", 0)?,
        score_examples: s.get("score_examples")?,
        seed,
    })
}

/// Runs PFT for one seed, from a checkpoint when one is configured.
pub fn pft_one(s: &Settings, data: &Data, seed: u64) -> Result<PftOutput> {
    let cfg = pft_config(s, seed)?;
    let (train, test) = (data.train.to_batch(), data.test.to_batch());
    match s.opt::<String>("checkpoint")? {
        Some(path) => {
            let ck = Checkpoint::load(Path::new(&path)).with_context(|| format!("loading {path}"))?;
            cfg.validate()?;
            Ok(pft_from_dense(ck.net, Vec::new(), &train, &test, &cfg)?)
        }
        None => Ok(pft(&train, &test, &init_net(s, &data.train, seed)?, &cfg)?),
    }
}

pub fn pft_cmd(s: &Settings, ctx: &Ctx) -> Result<RunRecord> {
    let data = load_data(s)?;
    let seeds = seeds(s)?;
    let outs = fan_out(&seeds, ctx.jobs, |&seed| pft_one(s, &data, seed))?;

    let mut rec = RunRecord::new("pft", s.to_text(), seeds[0]);
    rec.data_hash = Some(data.hash.clone());
    let mut metrics = Table::new([
        "seed",
        "dense_test_error",
        "osp_test_error",
        "pft_test_error",
        "pft_unfinetuned_test_error",
        "overlap_frac",
        "keep_count",
    ]);
    let mut trace = Table::new(["seed", "epoch", "loss_nats", "entropy_bits", "expected_sparsity"]);
    let mut per_seed = Vec::new();
    for (&seed, out) in seeds.iter().zip(&outs) {
        let dir = seed_dir(ctx, seed)?;
        fs::write(dir.join("config.txt"), with_seed(s, seed).to_text())?;
        let ck = |net: &DenseNet| Checkpoint {
            net: net.clone(),
            seed,
            config: json!({ "command": "pft" }),
        };
        ck(&out.dense).save(&dir.join("dense.spck"))?;
        ck(&out.sparse_net).save(&dir.join("sparse.spck"))?;
        ck(&out.osp_net).save(&dir.join("osp.spck"))?;
        fs::write(dir.join("osp_mask.spbm"), binary_mask_to_bytes(&out.masks.osp_mask))?;
        fs::write(dir.join("pft_mask.spbm"), binary_mask_to_bytes(&out.masks.hard_mask))?;
        fs::write(dir.join("distribution.spmd"), mask_distribution_to_bytes(&out.masks.distribution))?;

        let m = &out.metrics;
        let d = out.dense.num_weights();
        let k = SparsityTarget::new(s.get("sparsity")?)?.keep_count(d);
        rec.checks.push(Check::holds(&format!("seed{seed}_pft_mask_keeps_k"), out.masks.hard_mask.popcount() == k));
        rec.checks.push(Check::holds(&format!("seed{seed}_osp_mask_keeps_k"), out.masks.osp_mask.popcount() == k));
        let pruned_nonzero = out
            .sparse_net
            .weights()
            .iter()
            .zip(out.masks.hard_mask.bits())
            .filter(|(w, keep)| !**keep && **w != 0.0)
            .count();
        rec.checks.push(Check::at_most(&format!("seed{seed}_pruned_weights_nonzero"), pruned_nonzero as f64, 0.0));
        for (name, v) in [("dense", m.dense_test_error), ("osp", m.osp_test_error), ("pft", m.pft_test_error), ("overlap", m.overlap)] {
            rec.checks.push(check_unit(&format!("seed{seed}_{name}_in_unit_interval"), v));
        }
        metrics.push([
            seed.to_string(),
            m.dense_test_error.to_string(),
            m.osp_test_error.to_string(),
            m.pft_test_error.to_string(),
            m.pft_unfinetuned_test_error.to_string(),
            m.overlap.to_string(),
            m.keep_count.to_string(),
        ]);
        for e in &out.masks.trace {
            trace.push([
                seed.to_string(),
                e.epoch.to_string(),
                e.loss.to_string(),
                e.entropy.to_string(),
                e.expected_sparsity.to_string(),
            ]);
        }
        per_seed.push(json!({ "seed": seed, "metrics": m }));
    }
    rec.tables.push(("metrics".into(), metrics));
    rec.tables.push(("mask_trace".into(), trace));
    rec.report = json!({ "runs": per_seed, "num_weights": outs[0].dense.num_weights() });
    Ok(rec)
}

pub fn pbp_config(s: &Settings, seed: u64) -> Result<PbpConfig> {
    Ok(PbpConfig {
        alpha: s.get("alpha")?,
        sparsity: s.get("sparsity")?,
        criterion: s.get("criterion")?,
        init_scheme: init_scheme(s)?,
        beta: s.get("beta")?,
        pretrain: sgd(s, "epochs", "lr", 0)?,
        stage2: sgd(s, "stage2_epochs", "lr", 0)?,
        stage2_mask_lr: s.get("stage2_mask_lr")?,
        sigma2_grid: s.grid("sigma2")?,
        train_prior_sigma: s.get("train_prior_sigma")?,
        stage3: sgd(s, "stage3_epochs", "stage3_lr", 0)?,
        stage3_mask_lr: s.get("stage3_mask_lr")?,
        train_posterior_lambda: s.get("train_posterior_lambda")?,
        train_posterior_sigma: s.get("train_posterior_sigma")?,
        kl_downweight: s.get("kl_downweight")?,
        delta: DeltaSplit::from_total(s.get("delta")?)?,
        lambda_floor: s.get("lambda_floor")?,
        mc_samples: s.get("mc_samples")?,
        select_samples: s.get("select_samples")?,
        test_samples: s.get("test_samples")?,
        score_examples: s.get("score_examples")?,
        seed,
    })
}

/// Everything `bound` needs to recompute a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub n_total: usize,
    pub delta: DeltaSplit,
    pub grid_size: usize,
    pub mc_samples: usize,
    pub certificate_seed: u64,
    pub data_hash: String,
    pub report: BoundReport,
}

pub fn pbp_one(s: &Settings, data: &Data, seed: u64) -> Result<PbpOutput> {
    let cfg = pbp_config(s, seed)?;
    cfg.validate()?;
    Ok(pbp(&data.train, Some(&data.test), &init_net(s, &data.train, seed)?, &cfg)?)
}

pub fn pbp_cmd(s: &Settings, ctx: &Ctx) -> Result<RunRecord> {
    pbp_config(s, 0)?.validate()?;
    let data = load_data(s)?;
    let seeds = seeds(s)?;
    let outs = fan_out(&seeds, ctx.jobs, |&seed| pbp_one(s, &data, seed))?;

    let mut rec = RunRecord::new("pbp", s.to_text(), seeds[0]);
    rec.data_hash = Some(data.hash.clone());
    let mut summary = Table::new([
        "seed",
        "sigma2",
        "kl_nats",
        "epsilon",
        "emp_gibbs_01",
        "bound",
        "branch",
        "posterior_test_error",
        "prior_test_error",
        "expected_sparsity",
    ]);
    let mut cands = Table::new(["seed", "sigma2", "prior_sigma", "kl_nats", "selection_bound", "chosen"]);
    let mut trace = Table::new(["seed", "sigma2", "epoch", "objective", "surrogate_loss", "kl_nats"]);
    let mut runs = Vec::new();
    for (&seed, out) in seeds.iter().zip(&outs) {
        let dir = seed_dir(ctx, seed)?;
        fs::write(dir.join("config.txt"), with_seed(s, seed).to_text())?;
        Checkpoint {
            net: out.net.clone(),
            seed,
            config: json!({ "command": "pbp", "role": "prior means and biases" }),
        }
        .save(&dir.join("net.spck"))?;
        fs::write(dir.join("prior.spss"), spike_slab_to_bytes(&out.prior))?;
        fs::write(dir.join("posterior.spss"), spike_slab_to_bytes(&out.posterior))?;
        fs::write(dir.join("split.json"), serde_json::to_string(&out.split)?)?;
        let r = &out.report;
        let cert = CertificateFile {
            n_total: r.n_total,
            delta: DeltaSplit { bound: r.delta_bound, mc: r.delta_mc },
            grid_size: r.grid_size,
            mc_samples: r.mc_samples,
            certificate_seed: certificate_seed(seed),
            data_hash: data.hash.clone(),
            report: r.clone(),
        };
        fs::write(dir.join("certificate.json"), serde_json::to_string_pretty(&cert)?)?;

        rec.checks.push(Check::holds(&format!("seed{seed}_held_out_untouched_before_posterior"), out.audit_clean));
        rec.checks.push(Check::holds(&format!("seed{seed}_kl_finite_nonnegative"), r.kl_total.is_finite() && r.kl_total >= 0.0));
        rec.checks.push(Check::holds(
            &format!("seed{seed}_bound_dominates_empirical"),
            r.bound >= r.emp_gibbs_01 && r.emp_gibbs_01 >= r.emp_gibbs_01_mean,
        ));
        rec.checks.push(check_unit(&format!("seed{seed}_bound_in_unit_interval"), r.bound));
        let m = &out.metrics;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        summary.push([
            seed.to_string(),
            out.candidates[out.chosen].sigma2.to_string(),
            r.kl_total.to_string(),
            r.epsilon.to_string(),
            r.emp_gibbs_01.to_string(),
            r.bound.to_string(),
            format!("{:?}", r.branch).to_lowercase(),
            opt(m.posterior_gibbs_test_error),
            opt(m.prior_gibbs_test_error),
            m.posterior_expected_sparsity.to_string(),
        ]);
        for (g, c) in out.candidates.iter().enumerate() {
            cands.push([
                seed.to_string(),
                c.sigma2.to_string(),
                c.prior_sigma.to_string(),
                c.kl.to_string(),
                c.selection_bound.to_string(),
                (g == out.chosen).to_string(),
            ]);
            for e in &c.stage3_trace {
                trace.push([
                    seed.to_string(),
                    c.sigma2.to_string(),
                    e.epoch.to_string(),
                    e.objective.to_string(),
                    e.surrogate.to_string(),
                    e.kl.to_string(),
                ]);
            }
        }
        runs.push(json!({ "seed": seed, "report": r, "metrics": m, "sigma2": out.candidates[out.chosen].sigma2 }));
    }
    rec.tables.push(("certificates".into(), summary));
    rec.tables.push(("candidates".into(), cands));
    rec.tables.push(("stage3_trace".into(), trace));
    rec.report = json!({ "runs": runs });
    Ok(rec)
}

pub fn bound_cmd(s: &Settings, _ctx: &Ctx) -> Result<RunRecord> {
    let Some(run) = s.opt::<String>("run")? else {
        bail!("`run` is required");
    };
    let run = Path::new(&run);
    let cert: CertificateFile = serde_json::from_str(&fs::read_to_string(run.join("certificate.json"))?)?;
    let run_settings = {
        let keys = super::keys_for("pbp");
        Settings::from_text(&keys, &fs::read_to_string(run.join("config.txt"))?)?
    };
    let data = load_data(&run_settings)?;
    let split: stochprune::data::SplitSpec = serde_json::from_str(&fs::read_to_string(run.join("split.json"))?)?;
    let net = Checkpoint::load(&run.join("net.spck"))?.net;
    let prior = spike_slab_from_bytes(&fs::read(run.join("prior.spss"))?)?;
    let posterior = spike_slab_from_bytes(&fs::read(run.join("posterior.spss"))?)?;
    if split.n_total() != data.train.len() {
        bail!("split covers {} examples, data has {}", split.n_total(), data.train.len());
    }
    let held = data.train.select(&split.held_out).to_batch();
    let mc_samples = s.opt::<usize>("mc_samples")?.unwrap_or(cert.mc_samples);
    let seed = s.opt::<u64>("seed")?.unwrap_or(cert.certificate_seed);
    let report = certify(&net, &prior, &posterior, &held, cert.n_total, cert.delta, cert.grid_size, mc_samples, seed)?;

    let mut rec = RunRecord::new("bound", s.to_text(), seed);
    rec.data_hash = Some(data.hash.clone());
    rec.checks.push(Check::holds("data_hash_matches_run", data.hash == cert.data_hash));
    if mc_samples == cert.mc_samples && seed == cert.certificate_seed {
        rec.checks.push(Check::holds("reproduces_stored_report", report == cert.report));
    }
    rec.checks.push(Check::holds("bound_dominates_empirical", report.bound >= report.emp_gibbs_01));
    rec.report = json!({ "report": report, "stored": cert.report });
    Ok(rec)
}
