//! Cross-validation sweeps with on-disk records:
//!
//! ```text
//! <out>/<dataset>/<pathway>/
//!     config.toml  summary.kv  summary.tsv  iteration_curves.tsv  runs.tsv
//!     <seed>_<fold>/
//!         metrics.tsv  run.kv  timing.kv  checkpoint.txt  lipschitz.kv
//! ```

mod config;
mod report;

pub use config::ExperimentConfig;
pub use report::{
    emit_iteration_curves, emit_summary, mean_std, metrics_tsv, run_kv, IterationCurves, RunRecord, Summary,
    METRICS_HEADER, SUMMARY_HEADER,
};

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{parse_tu_dataset, stratified_folds, BatchedGraphs, Dataset};
use crate::lipschitz::{lipschitz_report, LipschitzReport};
use crate::model::{cross_validate, mix_seed, Checkpoint, Model};
use crate::operators::GraphContext;

/// What a finished sweep produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub summary: Option<Summary>,
    pub records: Vec<RunRecord>,
    pub failed_runs: Vec<(u64, usize, String)>,
    pub certificate_violations: Vec<(u64, usize)>,
    /// Fraction of training batches whose forward solve diverged or did not
    /// converge.
    pub solver_failure_rate: f64,
    pub max_solver_failure_rate: f64,
}

impl ExperimentOutcome {
    /// False when any run failed, any certificate was violated, or the
    /// solver failure rate exceeded its threshold.
    pub fn ok(&self) -> bool {
        self.failed_runs.is_empty()
            && self.certificate_violations.is_empty()
            && self.solver_failure_rate <= self.max_solver_failure_rate
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    if !cfg.data_dir.is_dir() {
        return Err(Error::MissingFile(cfg.data_dir.clone()));
    }
    parse_tu_dataset(&cfg.data_dir, &cfg.dataset, cfg.model.max_cycle_len)
}

/// Contraction record of a trained model's operator on the batched test graphs.
pub fn trained_lipschitz(model: &Model, dataset: &Dataset, test: &[usize], pairs: usize, seed: u64) -> Result<LipschitzReport> {
    let batch = BatchedGraphs::from_graphs(&dataset.graphs, test)?;
    let ctx = GraphContext {
        propagation: batch.propagation.clone(),
        h: batch.features.matmul_t(&model.encoder)?,
        tau: batch.descriptors.clone(),
    };
    lipschitz_report(&model.op, &ctx, pairs, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs the full sweep described by `cfg` and writes every record.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let dir = cfg.pathway_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let results = cross_validate(&dataset, &cfg.model, &cfg.train, &cfg.seeds, cfg.folds, cfg.workers)?;
    let labels = dataset.labels();
    let mut outcome = ExperimentOutcome {
        dir: dir.clone(),
        summary: None,
        records: Vec::new(),
        failed_runs: Vec::new(),
        certificate_violations: Vec::new(),
        solver_failure_rate: 0.0,
        max_solver_failure_rate: cfg.max_solver_failure_rate,
    };
    let (mut failed_batches, mut total_batches) = (0usize, 0usize);
    let batches_per_epoch = |n: usize| n.div_ceil(cfg.train.batch_size);

    for r in &results {
        let run_dir = cfg.run_dir(r.seed, r.fold);
        fs::create_dir_all(&run_dir)?;
        let (model, metrics) = match &r.outcome {
            Ok(v) => v,
            Err(e) => {
                fs::write(run_dir.join("error.txt"), format!("{e}\n"))?;
                outcome.failed_runs.push((r.seed, r.fold, e.clone()));
                continue;
            }
        };
        let fold = &stratified_folds(&labels, cfg.folds, r.seed)?[r.fold];
        fs::write(run_dir.join("metrics.tsv"), metrics_tsv(metrics))?;
        fs::write(run_dir.join("run.kv"), run_kv(r.seed, r.fold, metrics))?;
        fs::write(
            run_dir.join("timing.kv"),
            format!("seconds\t{:?}\nminutes\t{:?}\n", r.seconds, r.seconds / 60.0),
        )?;
        Checkpoint::from_model(model).save(&run_dir.join("checkpoint.txt"))?;
        let report = trained_lipschitz(
            model,
            &dataset,
            &fold.test,
            cfg.lipschitz_pairs,
            mix_seed(&[r.seed, r.fold as u64, 0x11b]),
        )?;
        fs::write(run_dir.join("lipschitz.kv"), report.to_kv())?;
        if !report.certified() {
            log::error!(
                "seed {} fold {}: empirical Lipschitz {} exceeds bound {}",
                r.seed,
                r.fold,
                report.empirical,
                report.analytic
            );
            outcome.certificate_violations.push((r.seed, r.fold));
        }
        for e in &metrics.epochs {
            failed_batches += e.skipped_batches + e.forward_nonconverged;
        }
        total_batches += batches_per_epoch(fold.train.len()) * metrics.epochs.len();
        outcome.records.push(RunRecord::new(r.seed, r.fold, metrics, r.seconds));
    }
    if total_batches > 0 {
        outcome.solver_failure_rate = failed_batches as f64 / total_batches as f64;
    }

    let variant = cfg.model.pathway.as_str();
    let mut runs = String::from("seed\tfold\ttest_accuracy\ttest_loss\tfinal_forward_iterations\n");
    for r in &outcome.records {
        let _ = writeln!(
            runs,
            "{}\t{}\t{:?}\t{:?}\t{:?}",
            r.seed, r.fold, r.test_accuracy, r.test_loss, r.final_iterations
        );
    }
    fs::write(dir.join("runs.tsv"), runs)?;
    if !outcome.records.is_empty() {
        let summary = emit_summary(variant, &cfg.dataset, &outcome.records)?;
        fs::write(dir.join("summary.kv"), summary.to_kv())?;
        fs::write(dir.join("summary.tsv"), summary.to_tsv())?;
        let series: Vec<Vec<f64>> = outcome.records.iter().map(|r| r.iterations.clone()).collect();
        if cfg.train.epochs > 0 {
            fs::write(dir.join("iteration_curves.tsv"), emit_iteration_curves(variant, &series)?.to_tsv())?;
        }
        outcome.summary = Some(summary);
    }
    Ok(outcome)
}
