//! Analytic contraction budgets and sampled Lipschitz estimates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::operators::{GraphContext, InjectedOperator, Pathway};
use crate::quantum::QuantumModule;
use crate::tensor::{dot, standard_normal, Tensor};

pub const POWER_ITERS: usize = 100;
pub const POWER_TOL: f64 = 1e-12;
/// Clipping runs the power iteration much further than the reporting default.
pub const CLIP_POWER_ITERS: usize = 5000;
pub const CLIP_POWER_TOL: f64 = 1e-15;
const POWER_SEED: u64 = 0x5eed_5eed;

/// Largest singular value by power iteration on `M^T M` from a fixed random
/// start. Stops after `iters` steps or when the relative change falls below
/// `tol`.
pub fn spectral_norm(m: &Tensor, iters: usize, tol: f64) -> f64 {
    if m.is_empty() || m.max_abs() == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = (0..m.cols()).map(|_| standard_normal(&mut rng)).collect();
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let mv = m.matvec(&v);
        let s = dot(&mv, &mv).sqrt();
        let w = m.t_matvec(&mv);
        let nw = dot(&w, &w).sqrt();
        if nw == 0.0 {
            return s;
        }
        v = w.into_iter().map(|x| x / nw).collect();
        let done = (s - sigma).abs() <= tol * s;
        sigma = s;
        if done {
            break;
        }
    }
    let mv = m.matvec(&v);
    sigma.max(dot(&mv, &mv).sqrt())
}

/// `2 sqrt(n_q) ||W_out||_2 ||W_in||_2` using the maps as they enter the
/// forward pass (normalized when spectral normalization is on).
pub fn lemma2_bound(module: &QuantumModule) -> f64 {
    let (w_in, w_out) = module.effective_maps();
    2.0 * (module.n_qubits() as f64).sqrt()
        * spectral_norm(&w_out, CLIP_POWER_ITERS, CLIP_POWER_TOL)
        * spectral_norm(&w_in, CLIP_POWER_ITERS, CLIP_POWER_TOL)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremBounds {
    pub id: f64,
    pub sd: f64,
    pub bd: f64,
}

/// `(kappa, kappa + alpha L_sd, kappa (1 + alpha L_bd))`.
pub fn theorem_bounds(kappa: f64, alpha: f64, lq_sd: f64, lq_bd: f64) -> Result<TheoremBounds> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::InvalidArgument(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    if !(alpha >= 0.0) || !(lq_sd >= 0.0) || !(lq_bd >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha and L_q must be non-negative, got {alpha}, {lq_sd}, {lq_bd}"
        )));
    }
    Ok(TheoremBounds {
        id: kappa,
        sd: kappa + alpha * lq_sd,
        bd: kappa * (1.0 + alpha * lq_bd),
    })
}

pub const PAIR_SCALES: [f64; 3] = [0.1, 1.0, 10.0];
pub const PERTURBATION: f64 = 1e-3;

fn random_with_norm<R: Rng + ?Sized>(rows: usize, cols: usize, norm: f64, rng: &mut R) -> Tensor {
    let t = Tensor::randn(rows, cols, rng);
    let n = t.frobenius_norm();
    t.scale(norm / n)
}

/// Largest sampled `||f(S1) - f(S2)||_F / ||S1 - S2||_F`.
///
/// Pairs cycle through independent draws at Frobenius norms 0.1, 1 and 10 and
/// perturbation pairs `(S, S + delta)` with `||delta||_F = 1e-3`. Coincident
/// pairs are skipped.
pub fn empirical_lipschitz<F, R>(mut f: F, rows: usize, cols: usize, pairs: usize, rng: &mut R) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    if pairs == 0 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let mut best = 0.0f64;
    for k in 0..pairs {
        let kind = k % (PAIR_SCALES.len() + 1);
        let (s1, s2) = if kind < PAIR_SCALES.len() {
            let scale = PAIR_SCALES[kind];
            (
                random_with_norm(rows, cols, scale, rng),
                random_with_norm(rows, cols, scale, rng),
            )
        } else {
            let scale = PAIR_SCALES[(k / (PAIR_SCALES.len() + 1)) % PAIR_SCALES.len()];
            let s = random_with_norm(rows, cols, scale, rng);
            let d = random_with_norm(rows, cols, PERTURBATION, rng);
            let s2 = s.add(&d)?;
            (s, s2)
        };
        let den = s1.sub(&s2)?.frobenius_norm();
        if den == 0.0 {
            continue;
        }
        let num = f(&s1)?.sub(&f(&s2)?)?.frobenius_norm();
        best = best.max(num / den);
    }
    Ok(best)
}

/// Contraction record of one operator on one graph context.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzReport {
    pub pathway: Pathway,
    pub kappa: f64,
    pub alpha: f64,
    /// Analytic circuit Lipschitz constant of the operator's quantum module (0 when absent).
    pub lq: f64,
    pub analytic: f64,
    pub empirical: f64,
    pub samples: usize,
}

/// Slack allowed between a sampled estimate and its analytic budget.
pub const CERTIFICATE_EPS: f64 = 1e-9;

impl LipschitzReport {
    /// Sampled estimate within the analytic budget.
    pub fn certified(&self) -> bool {
        self.empirical <= self.analytic + CERTIFICATE_EPS
    }

    pub fn contractive(&self) -> bool {
        self.analytic < 1.0
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pathway\t{}", self.pathway);
        let _ = writeln!(s, "kappa\t{:?}", self.kappa);
        let _ = writeln!(s, "alpha\t{:?}", self.alpha);
        let _ = writeln!(s, "lq\t{:?}", self.lq);
        let _ = writeln!(s, "analytic_bound\t{:?}", self.analytic);
        let _ = writeln!(s, "empirical\t{:?}", self.empirical);
        let _ = writeln!(s, "samples\t{}", self.samples);
        let _ = writeln!(s, "certified\t{}", self.certified());
        let _ = writeln!(s, "contractive\t{}", self.contractive());
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("lipschitz record missing '{k}'")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad '{k}': {e}")))
        };
        Ok(Self {
            pathway: get("pathway")?.parse()?,
            kappa: num("kappa")?,
            alpha: num("alpha")?,
            lq: num("lq")?,
            analytic: num("analytic_bound")?,
            empirical: num("empirical")?,
            samples: get("samples")?
                .parse()
                .map_err(|e| Error::Config(format!("bad 'samples': {e}")))?,
        })
    }
}

/// Tab-separated `key\tvalue` lines.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key<TAB>value'", i + 1)))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

/// Analytic budget of `op` from its current parameters.
pub fn analytic_bound(op: &InjectedOperator) -> Result<(f64, f64)> {
    let kappa = op.backbone.kappa;
    let lq = op.quantum.as_ref().map_or(0.0, lemma2_bound);
    let b = theorem_bounds(kappa, op.alpha, lq, lq)?;
    let bound = match op.pathway {
        Pathway::Classical | Pathway::Id => b.id,
        Pathway::Sd => b.sd,
        Pathway::Bd => b.bd,
    };
    Ok((lq, bound))
}

/// Samples `pairs` iterate pairs for `op` on `ctx` and compares against the
/// analytic budget.
pub fn lipschitz_report<R: Rng + ?Sized>(
    op: &InjectedOperator,
    ctx: &GraphContext,
    pairs: usize,
    rng: &mut R,
) -> Result<LipschitzReport> {
    let (lq, analytic) = analytic_bound(op)?;
    let prepared = op.prepare(ctx)?;
    let rows = ctx.h.rows();
    let empirical = empirical_lipschitz(|z| op.apply_prepared(&prepared, z), rows, op.hidden_dim(), pairs, rng)?;
    Ok(LipschitzReport {
        pathway: op.pathway,
        kappa: op.backbone.kappa,
        alpha: op.alpha,
        lq,
        analytic,
        empirical,
        samples: pairs,
    })
}
