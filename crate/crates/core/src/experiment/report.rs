//! Tabular and key-value records. Floats use `{:?}` so every value re-parses
//! to the exact f64 that was aggregated.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::RunMetrics;

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("mean of an empty list".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

pub const METRICS_HEADER: &str = "epoch\tlr\ttrain_loss\ttrain_accuracy\tforward_iterations\tbackward_iterations\tforward_nonconverged\tbackward_nonconverged\tskipped_batches\tgrad_norm";

/// Per-epoch records without timings, so identical runs give identical bytes.
pub fn metrics_tsv(m: &RunMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{METRICS_HEADER}");
    for e in &m.epochs {
        let _ = writeln!(
            s,
            "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{}\t{}\t{}\t{:?}",
            e.epoch,
            e.lr,
            e.train_loss,
            e.train_accuracy,
            e.forward_iterations,
            e.backward_iterations,
            e.forward_nonconverged,
            e.backward_nonconverged,
            e.skipped_batches,
            e.grad_norm
        );
    }
    s
}

/// Final figures of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub fold: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Mean forward iterations over the final epoch's batches.
    pub final_iterations: f64,
    pub minutes: f64,
    /// Forward iterations per epoch.
    pub iterations: Vec<f64>,
}

impl RunRecord {
    pub fn new(seed: u64, fold: usize, m: &RunMetrics, seconds: f64) -> Self {
        Self {
            seed,
            fold,
            test_accuracy: m.test.accuracy,
            test_loss: m.test.loss,
            final_iterations: m.epochs.last().map_or(0.0, |e| e.forward_iterations),
            minutes: seconds / 60.0,
            iterations: m.epochs.iter().map(|e| e.forward_iterations).collect(),
        }
    }
}

pub fn run_kv(seed: u64, fold: usize, m: &RunMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed\t{seed}");
    let _ = writeln!(s, "fold\t{fold}");
    let _ = writeln!(s, "epochs\t{}", m.epochs.len());
    let _ = writeln!(s, "test_accuracy\t{:?}", m.test.accuracy);
    let _ = writeln!(s, "test_loss\t{:?}", m.test.loss);
    let _ = writeln!(s, "test_graphs\t{}", m.test.graphs);
    let _ = writeln!(s, "test_forward_iterations\t{:?}", m.test.forward_iterations);
    let _ = writeln!(s, "test_max_residual\t{:?}", m.test.max_residual);
    let _ = writeln!(s, "test_nonconverged\t{}", m.test.nonconverged);
    let _ = writeln!(
        s,
        "final_forward_iterations\t{:?}",
        m.epochs.last().map_or(0.0, |e| e.forward_iterations)
    );
    let _ = writeln!(s, "skipped_batches\t{}", m.skipped_batches());
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub variant: String,
    pub dataset: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub iter_mean: f64,
    pub time_minutes_mean: f64,
}

pub const SUMMARY_HEADER: &str = "variant\tdataset\truns\tacc_mean\tacc_std\titer_mean\ttime_minutes_mean";

impl Summary {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant\t{}", self.variant);
        let _ = writeln!(s, "dataset\t{}", self.dataset);
        let _ = writeln!(s, "runs\t{}", self.runs);
        let _ = writeln!(s, "acc_mean\t{:?}", self.acc_mean);
        let _ = writeln!(s, "acc_std\t{:?}", self.acc_std);
        let _ = writeln!(s, "iter_mean\t{:?}", self.iter_mean);
        let _ = writeln!(s, "time_minutes_mean\t{:?}", self.time_minutes_mean);
        s
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{SUMMARY_HEADER}\n{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\n",
            self.variant, self.dataset, self.runs, self.acc_mean, self.acc_std, self.iter_mean, self.time_minutes_mean
        )
    }
}

pub fn emit_summary(variant: &str, dataset: &str, runs: &[RunRecord]) -> Result<Summary> {
    let acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (acc_mean, acc_std) = mean_std(&acc)?;
    let (iter_mean, _) = mean_std(&runs.iter().map(|r| r.final_iterations).collect::<Vec<_>>())?;
    let (time_minutes_mean, _) = mean_std(&runs.iter().map(|r| r.minutes).collect::<Vec<_>>())?;
    Ok(Summary {
        variant: variant.into(),
        dataset: dataset.into(),
        runs: runs.len(),
        acc_mean,
        acc_std,
        iter_mean,
        time_minutes_mean,
    })
}

/// Per-epoch mean and sample std of forward iterations across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationCurves {
    pub variant: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn emit_iteration_curves(variant: &str, series: &[Vec<f64>]) -> Result<IterationCurves> {
    let first = series
        .first()
        .ok_or_else(|| Error::InvalidArgument("no runs to aggregate".into()))?;
    if let Some(bad) = series.iter().find(|s| s.len() != first.len()) {
        return Err(Error::InvalidArgument(format!(
            "runs disagree on epoch count: {} vs {}",
            first.len(),
            bad.len()
        )));
    }
    let mut mean = Vec::with_capacity(first.len());
    let mut std = Vec::with_capacity(first.len());
    for e in 0..first.len() {
        let col: Vec<f64> = series.iter().map(|s| s[e]).collect();
        let (m, s) = mean_std(&col)?;
        mean.push(m);
        std.push(s);
    }
    Ok(IterationCurves {
        variant: variant.into(),
        mean,
        std,
    })
}

impl IterationCurves {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tepoch\tmean_iterations\tstd_iterations\n");
        for (e, (m, d)) in self.mean.iter().zip(&self.std).enumerate() {
            let _ = writeln!(s, "{}\t{e}\t{m:?}\t{d:?}", self.variant);
        }
        s
    }
}
