use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use qignn::experiment::{run_experiment, ExperimentConfig};
use qignn::operators::Pathway;
use qignn::quantum::Encoding;
use qignn::solver::SolverMethod;

/// Cross-validated training of implicit graph networks with optional
/// quantum injection.
#[derive(Debug, Parser)]
#[command(name = "qignn", version)]
struct Args {
    /// TOML experiment config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,

    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding `<dataset>/<dataset>_A.txt` and friends.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    pathway: Option<Pathway>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    n_qubits: Option<usize>,
    /// `once` or `per-block`.
    #[arg(long)]
    encoding: Option<Encoding>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Forward solver: `picard` or `anderson`.
    #[arg(long)]
    solver: Option<SolverMethod>,
    #[arg(long)]
    fwd_max_iter: Option<usize>,
    #[arg(long)]
    fwd_tol: Option<f64>,
    #[arg(long)]
    bwd_max_iter: Option<usize>,
    #[arg(long)]
    bwd_tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel (seed, fold) jobs; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Args {
    fn config(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        set(&mut cfg.dataset, self.dataset);
        set(&mut cfg.data_dir, self.data_dir);
        set(&mut cfg.model.pathway, self.pathway);
        set(&mut cfg.seeds, self.seeds);
        set(&mut cfg.folds, self.folds);
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.train.lr, self.lr);
        set(&mut cfg.model.hidden_dim, self.hidden_dim);
        set(&mut cfg.model.n_qubits, self.n_qubits);
        set(&mut cfg.model.encoding, self.encoding);
        set(&mut cfg.model.alpha, self.alpha);
        set(&mut cfg.model.kappa, self.kappa);
        set(&mut cfg.model.forward.method, self.solver);
        set(&mut cfg.model.forward.max_iter, self.fwd_max_iter);
        set(&mut cfg.model.forward.tol, self.fwd_tol);
        set(&mut cfg.model.backward.max_iter, self.bwd_max_iter);
        set(&mut cfg.model.backward.tol, self.bwd_tol);
        set(&mut cfg.out, self.out);
        set(&mut cfg.workers, self.workers);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run() -> Result<bool> {
    let args = Args::parse();
    let print_only = args.print_config;
    let cfg = args.config()?;
    if print_only {
        print!("{}", cfg.to_toml());
        return Ok(true);
    }
    let outcome = run_experiment(&cfg)?;
    if let Some(s) = &outcome.summary {
        println!(
            "{} {}: accuracy {:.4} +- {:.4} over {} runs, final-epoch iterations {:.2}, {:.2} min per run",
            s.variant, s.dataset, s.acc_mean, s.acc_std, s.runs, s.iter_mean, s.time_minutes_mean
        );
    }
    for (seed, fold, e) in &outcome.failed_runs {
        eprintln!("run seed {seed} fold {fold} failed: {e}");
    }
    for (seed, fold) in &outcome.certificate_violations {
        eprintln!("run seed {seed} fold {fold}: contraction certificate violated");
    }
    if outcome.solver_failure_rate > outcome.max_solver_failure_rate {
        eprintln!(
            "solver failure rate {:.4} exceeds {:.4}",
            outcome.solver_failure_rate, outcome.max_solver_failure_rate
        );
    }
    println!("records in {}", outcome.dir.display());
    Ok(outcome.ok())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
