//! Subcommand table.

use std::path::PathBuf;

use anyhow::Result;
use stochprune::pipelines::RunRecord;

use crate::inputs::{DATA_KEYS, NET_KEYS};
use crate::settings::{Key, Settings};

pub mod analysis;
pub mod experiments;
pub mod train;

pub struct Ctx {
    pub out: PathBuf,
    pub jobs: usize,
}

pub type Runner = fn(&Settings, &Ctx) -> Result<RunRecord>;

pub struct Spec {
    pub name: &'static str,
    pub about: &'static str,
    pub groups: &'static [&'static [Key]],
    pub run: Runner,
}

pub const COMMANDS: &[Spec] = &[
    Spec {
        name: "pretrain",
        about: "Train a dense network and save a checkpoint",
        groups: &[train::PRETRAIN_KEYS, DATA_KEYS, NET_KEYS],
        run: train::pretrain,
    },
    Spec {
        name: "pft",
        about: "Score, train a relaxed mask, threshold and fine-tune",
        groups: &[train::PFT_KEYS, DATA_KEYS, NET_KEYS],
        run: train::pft_cmd,
    },
    Spec {
        name: "pbp",
        about: "Data-dependent prior, posterior optimisation and certificate",
        groups: &[train::PBP_KEYS, DATA_KEYS, NET_KEYS],
        run: train::pbp_cmd,
    },
    Spec {
        name: "bound",
        about: "Recompute the certificate of a saved pbp run",
        groups: &[train::BOUND_KEYS],
        run: train::bound_cmd,
    },
    Spec {
        name: "linear",
        about: "Check the linear-model formulas against brute force",
        groups: &[analysis::LINEAR_KEYS],
        run: analysis::linear_cmd,
    },
    Spec {
        name: "robustness",
        about: "Test error under weight perturbations, dense vs pruned",
        groups: &[experiments::ROBUSTNESS_KEYS, train::PFT_KEYS, DATA_KEYS, NET_KEYS],
        run: experiments::robustness_cmd,
    },
    Spec {
        name: "overlap",
        about: "Overlap of one-shot and relaxed-trained masks across sparsities",
        groups: &[experiments::OVERLAP_KEYS, train::PFT_KEYS, DATA_KEYS, NET_KEYS],
        run: experiments::overlap_cmd,
    },
    Spec {
        name: "strong-lth",
        about: "Train masks over frozen random weights",
        groups: &[experiments::STRONG_LTH_KEYS, DATA_KEYS],
        run: experiments::strong_lth_cmd,
    },
    Spec {
        name: "mask-stability",
        about: "Magnitude masks across retraining runs from one initialisation",
        groups: &[experiments::STABILITY_KEYS, DATA_KEYS, NET_KEYS],
        run: experiments::mask_stability_cmd,
    },
    Spec {
        name: "entropy",
        about: "Mask entropy against sparsity for the initial distributions",
        groups: &[analysis::ENTROPY_KEYS],
        run: analysis::entropy_cmd,
    },
    Spec {
        name: "oracle-grad",
        about: "Relaxed and sampled keep-probability gradients against exact enumeration",
        groups: &[analysis::ORACLE_KEYS],
        run: analysis::oracle_cmd,
    },
];

/// Keys of a command; the first group wins on duplicate names.
pub fn keys_for(name: &str) -> Vec<Key> {
    let spec = COMMANDS.iter().find(|c| c.name == name).expect("known command");
    let mut keys: Vec<Key> = Vec::new();
    for group in spec.groups {
        for k in *group {
            if !keys.iter().any(|e| e.name == k.name) {
                keys.push(*k);
            }
        }
    }
    keys
}
