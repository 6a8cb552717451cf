use std::time::Instant;

use rayon::prelude::*;

use super::{train_run, Model, ModelConfig, RunMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{stratified_folds, Dataset};

/// One `(seed, fold)` cell of a cross-validation sweep. A failed run keeps
/// its error message so the other cells still report.
#[derive(Debug)]
pub struct RunResult {
    pub seed: u64,
    pub fold: usize,
    pub seconds: f64,
    pub outcome: std::result::Result<(Model, RunMetrics), String>,
}

/// Stratified `folds`-fold cross-validation for every seed. Runs execute in
/// parallel on a pool of `workers` threads (0 means one per core); results
/// come back ordered by seed, then fold.
pub fn cross_validate(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    folds: usize,
    workers: usize,
) -> Result<Vec<RunResult>> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let labels = dataset.labels();
    let mut jobs = Vec::new();
    for &seed in seeds {
        for (k, fold) in stratified_folds(&labels, folds, seed)?.into_iter().enumerate() {
            jobs.push((seed, k, fold));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.into_par_iter()
            .map(|(seed, k, fold)| {
                let start = Instant::now();
                let outcome = train_run(dataset, &fold, model_cfg, train_cfg, seed).map_err(|e| e.to_string());
                match &outcome {
                    Ok((_, m)) => log::info!(
                        "{} seed {seed} fold {k}: test accuracy {:.4}",
                        model_cfg.pathway,
                        m.test.accuracy
                    ),
                    Err(e) => log::error!("{} seed {seed} fold {k} failed: {e}", model_cfg.pathway),
                }
                RunResult {
                    seed,
                    fold: k,
                    seconds: start.elapsed().as_secs_f64(),
                    outcome,
                }
            })
            .collect()
    }))
}
