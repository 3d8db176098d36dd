use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PianoRollDataset, Split};
use crate::error::{Error, Result};

use super::config::{RunConfig, SearchSpace};
use super::trainer::{
    evaluate, run_rng, train_with_checkpoint, RunRecord, RunStatus, NLL_AVERAGING,
};

pub const DEFAULT_RUNS: usize = 32;
pub const SEARCH_FILE: &str = "search.json";

/// Stream reserved for drawing configurations; run `i` trains on stream `i`.
const SAMPLER_STREAM: u64 = u64::MAX;

/// The `n_runs` configurations a search with `master_seed` trains.
pub fn sample_configs(
    space: &SearchSpace,
    n_runs: usize,
    master_seed: u64,
) -> Result<Vec<RunConfig>> {
    let mut rng = run_rng(master_seed, SAMPLER_STREAM);
    (0..n_runs)
        .map(|i| {
            let mut cfg = space.sample(&mut rng)?;
            cfg.seed = master_seed;
            cfg.stream = i as u64;
            Ok(cfg)
        })
        .collect()
}

/// Index of the lowest best-validation NLL; ties go to the earliest run.
pub fn select_best(records: &[RunRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        if let Some(v) = r.best_valid_nll.filter(|v| v.is_finite()) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub master_seed: u64,
    pub selected: usize,
    pub test_nll: f64,
    pub nll_averaging: String,
    pub records: Vec<RunRecord>,
}

impl SearchOutcome {
    pub fn best(&self) -> &RunRecord {
        &self.records[self.selected]
    }
}

/// Train `n_runs` sampled configurations in parallel, select the one with
/// the lowest validation NLL and report its test NLL. Test data is only
/// touched for the selected run.
pub fn random_search(
    space: &SearchSpace,
    n_runs: usize,
    dataset: &PianoRollDataset,
    master_seed: u64,
    out_dir: Option<&Path>,
) -> Result<SearchOutcome> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument(
            "a search needs at least one run".into(),
        ));
    }
    let configs = sample_configs(space, n_runs, master_seed)?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let results: Vec<_> = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let dir = out_dir.map(|d| d.join(format!("run_{i:03}")));
            match train_with_checkpoint(cfg, dataset, dir.as_deref()) {
                Ok(r) => r,
                Err(e) => (
                    RunRecord {
                        config: cfg.clone(),
                        status: RunStatus::Failed {
                            reason: e.to_string(),
                        },
                        metrics: Vec::new(),
                        best_epoch: None,
                        best_valid_nll: None,
                        test_nll: None,
                        nll_averaging: NLL_AVERAGING.into(),
                    },
                    None,
                ),
            }
        })
        .collect();

    let (mut records, mut checkpoints): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let selected = select_best(&records).ok_or(Error::AllRunsFailed(n_runs))?;
    let ckpt = checkpoints[selected]
        .take()
        .ok_or(Error::AllRunsFailed(n_runs))?;
    drop(checkpoints);
    let test_nll = evaluate(&ckpt, dataset, Split::Test)?;
    records[selected].test_nll = Some(test_nll);

    let outcome = SearchOutcome {
        master_seed,
        selected,
        test_nll,
        nll_averaging: NLL_AVERAGING.into(),
        records,
    };
    if let Some(d) = out_dir {
        std::fs::write(d.join(SEARCH_FILE), serde_json::to_string_pretty(&outcome)?)?;
        outcome.best().save(
            &d.join(format!("run_{selected:03}"))
                .join(super::trainer::RECORD_FILE),
        )?;
    }
    Ok(outcome)
}
