//! Fixed-point solvers and the implicit backward solve.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverMethod {
    Picard,
    Anderson,
}

impl SolverMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverMethod::Picard => "picard",
            SolverMethod::Anderson => "anderson",
        }
    }
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "picard" => Ok(SolverMethod::Picard),
            "anderson" => Ok(SolverMethod::Anderson),
            other => Err(Error::InvalidArgument(format!(
                "unknown solver '{other}' (expected picard or anderson)"
            ))),
        }
    }
}

impl serde::Serialize for SolverMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for SolverMethod {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub max_iter: usize,
    pub tol: f64,
    /// Anderson history length.
    pub memory: usize,
    /// Tikhonov weight, relative to the largest diagonal entry of the
    /// residual Gram matrix.
    pub lambda: f64,
    /// Mixing between the map outputs (1) and the iterates (0).
    pub beta: f64,
}

impl SolverConfig {
    pub fn forward() -> Self {
        Self {
            method: SolverMethod::Anderson,
            max_iter: 300,
            tol: 1e-6,
            memory: 5,
            lambda: 1e-4,
            beta: 1.0,
        }
    }

    pub fn backward() -> Self {
        Self {
            max_iter: 150,
            tol: 1e-5,
            ..Self::forward()
        }
    }

    pub fn with_method(self, method: SolverMethod) -> Self {
        Self { method, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max iterations must be at least 1".into()));
        }
        if self.memory == 0 {
            return Err(Error::InvalidArgument("Anderson memory must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need lambda >= 0 and beta in (0, 1], got {} and {}",
                self.lambda, self.beta
            )));
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::forward()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub converged: bool,
    /// Number of map evaluations.
    pub iterations: usize,
    /// `||f(Z) - Z||_F` at the last evaluated iterate.
    pub residual: f64,
    pub solution: Tensor,
}

/// Dispatches on `cfg.method`.
pub fn solve<F>(f: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolveReport>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    match cfg.method {
        SolverMethod::Picard => picard_solve(f, z0, cfg),
        SolverMethod::Anderson => anderson_solve(f, z0, cfg),
    }
}

fn evaluate<F>(f: &mut F, z: &Tensor, iteration: usize) -> Result<(Tensor, f64)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let fz = match f(z) {
        Ok(v) => v,
        Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration }),
        Err(e) => return Err(e),
    };
    if fz.shape() != z.shape() {
        return Err(Error::Shape {
            op: "fixed-point map",
            lhs: z.shape(),
            rhs: fz.shape(),
        });
    }
    if !fz.is_finite() {
        return Err(Error::Diverged { iteration });
    }
    let r = fz.sub(z)?.frobenius_norm();
    Ok((fz, r))
}

/// `Z <- f(Z)` until the residual drops to `cfg.tol`.
pub fn picard_solve<F>(mut f: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolveReport>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let mut z = z0.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let (fz, r) = evaluate(&mut f, &z, it)?;
        residual = r;
        z = fz;
        if r <= cfg.tol {
            return Ok(SolveReport {
                converged: true,
                iterations: it,
                residual,
                solution: z,
            });
        }
    }
    Ok(SolveReport {
        converged: false,
        iterations: cfg.max_iter,
        residual,
        solution: z,
    })
}

/// Anderson-accelerated fixed-point iteration over the flattened iterates.
///
/// Each step mixes the last `m` map outputs with weights that minimize the
/// regularized combined residual subject to summing to one. A singular or
/// non-finite mixing system falls back to a plain Picard step.
pub fn anderson_solve<F>(mut f: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolveReport>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let (rows, cols) = z0.shape();
    let mut xs: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.memory);
    let mut fs: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.memory);
    let mut gs: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.memory);
    let mut z = z0.clone();
    let mut last_f = z0.clone();
    let mut residual = f64::INFINITY;

    for it in 1..=cfg.max_iter {
        let (fz, r) = evaluate(&mut f, &z, it)?;
        residual = r;
        if r <= cfg.tol {
            return Ok(SolveReport {
                converged: true,
                iterations: it,
                residual,
                solution: fz,
            });
        }
        if xs.len() == cfg.memory {
            xs.pop_front();
            fs.pop_front();
            gs.pop_front();
        }
        let g: Vec<f64> = fz.data().iter().zip(z.data()).map(|(a, b)| a - b).collect();
        xs.push_back(z.data().to_vec());
        fs.push_back(fz.data().to_vec());
        gs.push_back(g);

        let next = match mixing_weights(&gs, cfg.lambda) {
            Some(a) => {
                let mut x = vec![0.0; z.len()];
                for (k, &ak) in a.iter().enumerate() {
                    let (fk, xk) = (&fs[k], &xs[k]);
                    for (i, xi) in x.iter_mut().enumerate() {
                        *xi += ak * (cfg.beta * fk[i] + (1.0 - cfg.beta) * xk[i]);
                    }
                }
                x
            }
            None => fz.data().to_vec(),
        };
        last_f = fz;
        z = Tensor::from_vec(rows, cols, next)?;
        if !z.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
    }
    Ok(SolveReport {
        converged: false,
        iterations: cfg.max_iter,
        residual,
        solution: last_f,
    })
}

/// Solves the bordered system `[[0, 1^T], [1, G G^T + lambda s I]] [nu; a] = [1; 0]`
/// where `s` is the largest Gram diagonal entry.
fn mixing_weights(gs: &VecDeque<Vec<f64>>, lambda: f64) -> Option<Vec<f64>> {
    let n = gs.len();
    if n == 1 {
        return Some(vec![1.0]);
    }
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = dot(&gs[i], &gs[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let scale = (0..n).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let mut h = DMatrix::<f64>::zeros(n + 1, n + 1);
    for i in 0..n {
        h[(0, i + 1)] = 1.0;
        h[(i + 1, 0)] = 1.0;
        for j in 0..n {
            h[(i + 1, j + 1)] = gram[(i, j)] / scale;
        }
        h[(i + 1, i + 1)] += lambda;
    }
    let mut rhs = DVector::<f64>::zeros(n + 1);
    rhs[0] = 1.0;
    let sol = h.lu().solve(&rhs)?;
    let a: Vec<f64> = sol.iter().skip(1).copied().collect();
    a.iter().all(|v| v.is_finite()).then_some(a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardReport {
    pub u: Tensor,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `u = g + J^T u` where `vjp(u) = J^T u`, starting from `u = 0`.
/// Non-convergence is reported in the flag; the last iterate is returned.
pub fn implicit_backward<V>(mut vjp: V, g: &Tensor, cfg: &SolverConfig) -> Result<BackwardReport>
where
    V: FnMut(&Tensor) -> Result<Tensor>,
{
    let zero = Tensor::zeros(g.rows(), g.cols());
    let rep = solve(|u| vjp(u)?.add(g), &zero, cfg)?;
    if !rep.converged {
        log::warn!(
            "implicit backward did not converge: residual {:.3e} after {} iterations",
            rep.residual,
            rep.iterations
        );
    }
    Ok(BackwardReport {
        u: rep.solution,
        converged: rep.converged,
        iterations: rep.iterations,
        residual: rep.residual,
    })
}
