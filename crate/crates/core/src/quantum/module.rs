use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::circuit::{Circuit, Encoding};
use super::state::StateVector;
use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, standard_normal, Tensor};

/// Norms below this are treated as zero by spectral normalization.
pub const SPECTRAL_EPS: f64 = 1e-12;

/// Persistent power-iteration vectors for one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SpectralState {
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self {
            u: normalized((0..rows).map(|_| standard_normal(rng)).collect()),
            v: normalized((0..cols).map(|_| standard_normal(rng)).collect()),
        }
    }

    /// One power-iteration step on `w`; a zero matrix leaves the vectors alone.
    pub fn step(&mut self, w: &Tensor) {
        let v = w.t_matvec(&self.u);
        let nv = dot(&v, &v).sqrt();
        if nv < SPECTRAL_EPS {
            return;
        }
        let v: Vec<f64> = v.iter().map(|x| x / nv).collect();
        let u = w.matvec(&v);
        let nu = dot(&u, &u).sqrt();
        if nu < SPECTRAL_EPS {
            return;
        }
        self.u = u.iter().map(|x| x / nu).collect();
        self.v = v;
    }

    /// Current estimate `u^T W v` of the largest singular value.
    pub fn sigma(&self, w: &Tensor) -> f64 {
        dot(&self.u, &w.matvec(&self.v))
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Power steps applied to fresh singular-vector estimates.
pub const SPECTRAL_WARMUP: usize = 15;

/// `W / sigma` when the estimate is usable, `W` otherwise.
pub fn spectrally_normalized(w: &Tensor, state: &SpectralState) -> Tensor {
    let s = state.sigma(w);
    if s > SPECTRAL_EPS {
        w.scale(1.0 / s)
    } else {
        w.clone()
    }
}

/// Node-level map `s -> W_out <Z>(U(eta; tanh(W_in s)))`.
#[derive(Debug)]
pub struct QuantumModule {
    pub w_in: Tensor,
    pub w_out: Tensor,
    /// Trainable circuit angles as a `1 x P` row.
    pub angles: Tensor,
    pub circuit: Arc<Circuit>,
    /// Power-iteration state for `(W_in, W_out)` when spectral normalization
    /// is enabled.
    pub spectral: Option<(SpectralState, SpectralState)>,
    evaluations: AtomicUsize,
}

impl Clone for QuantumModule {
    fn clone(&self) -> Self {
        Self {
            w_in: self.w_in.clone(),
            w_out: self.w_out.clone(),
            angles: self.angles.clone(),
            circuit: self.circuit.clone(),
            spectral: self.spectral.clone(),
            evaluations: AtomicUsize::new(self.evaluations()),
        }
    }
}

impl QuantumModule {
    pub fn new(
        w_in: Tensor,
        w_out: Tensor,
        angles: Vec<f64>,
        repetitions: usize,
        encoding: Encoding,
        spectral: Option<(SpectralState, SpectralState)>,
    ) -> Result<Self> {
        let n_qubits = w_in.rows();
        if w_out.cols() != n_qubits {
            return Err(Error::Shape {
                op: "quantum module",
                lhs: w_in.shape(),
                rhs: w_out.shape(),
            });
        }
        let circuit = Arc::new(Circuit::deep_xyz(n_qubits, repetitions, encoding));
        if angles.len() != circuit.num_params() {
            return Err(Error::InvalidArgument(format!(
                "expected {} circuit angles, got {}",
                circuit.num_params(),
                angles.len()
            )));
        }
        Ok(Self {
            w_in,
            w_out,
            angles: Tensor::row_vector(&angles),
            circuit,
            spectral,
            evaluations: AtomicUsize::new(0),
        })
    }

    /// Random module: linear maps uniform in `+-1/sqrt(fan_in)`, angles
    /// uniform in `[-0.1, 0.1]`. With normalization on, the singular-vector
    /// estimates get [`SPECTRAL_WARMUP`] power steps so the first forward
    /// pass does not divide by an arbitrary `u^T W v`.
    pub fn random<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        n_qubits: usize,
        repetitions: usize,
        encoding: Encoding,
        spectral_normalize: bool,
        rng: &mut R,
    ) -> Self {
        let w_in = Tensor::uniform(n_qubits, d_in, 1.0 / (d_in as f64).sqrt(), rng);
        let w_out = Tensor::uniform(d_out, n_qubits, 1.0 / (n_qubits as f64).sqrt(), rng);
        let p = DeepXyzCount::of(n_qubits, repetitions);
        let angles: Vec<f64> = (0..p).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        let spectral = spectral_normalize.then(|| {
            (
                SpectralState::new(n_qubits, d_in, rng),
                SpectralState::new(d_out, n_qubits, rng),
            )
        });
        let mut m = Self::new(w_in, w_out, angles, repetitions, encoding, spectral).expect("consistent random module");
        for _ in 0..SPECTRAL_WARMUP {
            m.spectral_step();
        }
        m
    }

    pub fn n_qubits(&self) -> usize {
        self.w_in.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w_in.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_out.rows()
    }

    pub fn encoding(&self) -> Encoding {
        self.circuit.encoding()
    }

    pub fn repetitions(&self) -> usize {
        self.angles.len() / super::circuit::DeepXyzParams::per_repetition(self.n_qubits())
    }

    pub fn spectral_normalized(&self) -> bool {
        self.spectral.is_some()
    }

    /// Number of row-map evaluations performed so far (plain or taped).
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// One power-iteration step per normalized map. Called once per training
    /// forward pass, never inside a solve.
    pub fn spectral_step(&mut self) {
        if let Some((si, so)) = &mut self.spectral {
            si.step(&self.w_in);
            so.step(&self.w_out);
        }
    }

    /// `(W_in, W_out)` as used in the forward map.
    pub fn effective_maps(&self) -> (Tensor, Tensor) {
        match &self.spectral {
            Some((si, so)) => (
                spectrally_normalized(&self.w_in, si),
                spectrally_normalized(&self.w_out, so),
            ),
            None => (self.w_in.clone(), self.w_out.clone()),
        }
    }

    /// Pauli-Z expectations of one already-bounded input `u`.
    pub fn measure(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.circuit.run(self.angles.data(), u)?.z_expectations())
    }

    pub fn forward_row(&self, s: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::row_vector(s);
        Ok(self.forward_rows(&t)?.into_data())
    }

    /// Row-wise map over an `N x d_in` matrix.
    pub fn forward_rows(&self, s: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let vars = self.bind_constants(&mut tape);
        let out = self.apply(&mut tape, &vars, sv)?;
        Ok(tape.value(out).clone())
    }

    /// Places the module's parameters on the tape as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> QuantumVars {
        QuantumVars {
            w_in: tape.leaf(self.w_in.clone()),
            w_out: tape.leaf(self.w_out.clone()),
            angles: tape.leaf(self.angles.clone()),
        }
    }

    pub fn bind_constants(&self, tape: &mut Tape) -> QuantumVars {
        QuantumVars {
            w_in: tape.constant(self.w_in.clone()),
            w_out: tape.constant(self.w_out.clone()),
            angles: tape.constant(self.angles.clone()),
        }
    }

    /// Records the row-wise map of `s` on the tape.
    pub fn apply(&self, tape: &mut Tape, vars: &QuantumVars, s: Var) -> Result<Var> {
        let (rows, cols) = tape.shape(s);
        if cols != self.d_in() {
            return Err(Error::Shape {
                op: "quantum module input",
                lhs: (rows, cols),
                rhs: self.w_in.shape(),
            });
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let (w_in, w_out) = match &self.spectral {
            Some((si, so)) => (
                normalized_on_tape(tape, vars.w_in, si)?,
                normalized_on_tape(tape, vars.w_out, so)?,
            ),
            None => (vars.w_in, vars.w_out),
        };
        let pre = tape.matmul_t(s, w_in)?;
        let u = tape.tanh(pre)?;
        let m = measure_on_tape(tape, self.circuit.clone(), u, vars.angles)?;
        tape.matmul_t(m, w_out)
    }
}

struct DeepXyzCount;

impl DeepXyzCount {
    fn of(n_qubits: usize, repetitions: usize) -> usize {
        super::circuit::DeepXyzParams::per_repetition(n_qubits) * repetitions
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QuantumVars {
    pub w_in: Var,
    pub w_out: Var,
    pub angles: Var,
}

/// `W / (u^T W v)` with `u, v` held fixed, so the normalization is
/// differentiated through the singular-value estimate.
fn normalized_on_tape(tape: &mut Tape, w: Var, state: &SpectralState) -> Result<Var> {
    if state.sigma(tape.value(w)) <= SPECTRAL_EPS {
        return Ok(w);
    }
    let v = tape.constant(Tensor::from_vec(state.v.len(), 1, state.v.clone())?);
    let u = tape.constant(Tensor::from_vec(state.u.len(), 1, state.u.clone())?);
    let wv = tape.matmul(w, v)?;
    let prod = tape.mul(u, wv)?;
    let sigma = tape.sum(prod)?;
    let inv = tape.reciprocal(sigma)?;
    tape.mul_scalar(w, inv)
}

/// Expectation layer: rows of `u` (`N x n_q`, entries in (-1, 1)) to rows of
/// `<Z_j>`.
struct MeasureOp {
    circuit: Arc<Circuit>,
    states: Vec<StateVector>,
}

impl CustomOp for MeasureOp {
    fn name(&self) -> &'static str {
        "quantum_measure"
    }

    fn vjp(
        &self,
        parents: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (u, angles) = (parents[0], parents[1]);
        let per_row: Vec<(Vec<f64>, Vec<f64>)> = (0..u.rows())
            .into_par_iter()
            .map(|r| {
                self.circuit
                    .adjoint_grad(angles.data(), u.row(r), &self.states[r], grad.row(r))
            })
            .collect();
        let g_u = needs[0].then(|| {
            let mut g = Tensor::zeros(u.rows(), u.cols());
            for (r, (_, gu)) in per_row.iter().enumerate() {
                g.row_mut(r).copy_from_slice(gu);
            }
            g
        });
        let g_angles = needs[1].then(|| {
            let mut g = vec![0.0; angles.cols()];
            // Sequential reduction keeps the sum order fixed.
            for (gp, _) in &per_row {
                for (a, b) in g.iter_mut().zip(gp) {
                    *a += b;
                }
            }
            Tensor::row_vector(&g)
        });
        Ok(vec![g_u, g_angles])
    }
}

fn measure_on_tape(tape: &mut Tape, circuit: Arc<Circuit>, u: Var, angles: Var) -> Result<Var> {
    let uval = tape.value(u);
    let params = tape.value(angles).data();
    let states: Vec<StateVector> = (0..uval.rows())
        .into_par_iter()
        .map(|r| circuit.run(params, uval.row(r)))
        .collect::<Result<_>>()?;
    let n_q = circuit.n_qubits();
    let mut out = Tensor::zeros(uval.rows(), n_q);
    for (r, s) in states.iter().enumerate() {
        out.row_mut(r).copy_from_slice(&s.z_expectations());
    }
    tape.custom(Arc::new(MeasureOp { circuit, states }), &[u, angles], out)
}

/// Derivative of the module output with respect to circuit angle `index` by
/// the two-term shift rule.
pub fn parameter_shift_grad(module: &QuantumModule, s: &[f64], index: usize) -> Result<Vec<f64>> {
    if index >= module.circuit.num_params() {
        return Err(Error::InvalidArgument(format!(
            "angle index {index} out of range 0..{}",
            module.circuit.num_params()
        )));
    }
    let (w_in, w_out) = module.effective_maps();
    let u: Vec<f64> = w_in.matvec(s).into_iter().map(f64::tanh).collect();
    let shift = std::f64::consts::FRAC_PI_2;
    let eval = |delta: f64| -> Result<Vec<f64>> {
        let mut p = module.angles.data().to_vec();
        p[index] += delta;
        Ok(module.circuit.run(&p, &u)?.z_expectations())
    };
    let plus = eval(shift)?;
    let minus = eval(-shift)?;
    let dm: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / 2.0).collect();
    Ok(w_out.matvec(&dm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_map_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = QuantumModule::random(5, 3, 2, 1, Encoding::Once, false, &mut rng);
        m.w_out = Tensor::zeros(3, 2);
        let out = m.forward_row(&[1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn output_bounded_by_row_l1_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = QuantumModule::random(4, 6, 3, 1, Encoding::PerBlock, false, &mut rng);
        let s = Tensor::randn(50, 4, &mut rng).scale(3.0);
        let out = m.forward_rows(&s).unwrap();
        for k in 0..6 {
            let l1: f64 = m.w_out.row(k).iter().map(|v| v.abs()).sum();
            for r in 0..50 {
                assert!(out.get(r, k).abs() <= l1 + 1e-12);
            }
        }
    }

    #[test]
    fn single_rx_shift_rule_is_exact() {
        // One qubit, all angles zero except R_x in block 1: <Z> = cos(theta)
        // with a zero input.
        let mut angles = vec![0.0; 7];
        let theta = 0.7;
        angles[0] = theta;
        let m = QuantumModule::new(Tensor::zeros(1, 1), Tensor::identity(1), angles, 1, Encoding::Once, None).unwrap();
        assert!((m.forward_row(&[0.0]).unwrap()[0] - theta.cos()).abs() < 1e-15);
        let g = parameter_shift_grad(&m, &[0.0], 0).unwrap();
        assert!((g[0] + theta.sin()).abs() < 1e-15);
        assert!(parameter_shift_grad(&m, &[0.0], 7).is_err());
    }

    #[test]
    fn spectral_normalization_converges_on_diagonal() {
        let w = Tensor::diag(&[3.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut st = SpectralState::new(2, 2, &mut rng);
        for _ in 0..100 {
            st.step(&w);
        }
        let eff = spectrally_normalized(&w, &st);
        let s = crate::lipschitz::spectral_norm(&eff, 500, 1e-15);
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn spectral_normalization_leaves_zero_matrix() {
        let w = Tensor::zeros(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = SpectralState::new(2, 3, &mut rng);
        let before = st.clone();
        st.step(&w);
        assert_eq!(st, before);
        assert_eq!(spectrally_normalized(&w, &st), w);
    }

    #[test]
    fn evaluation_counter_tracks_row_map_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = QuantumModule::random(3, 3, 2, 1, Encoding::Once, false, &mut rng);
        let s = Tensor::randn(4, 3, &mut rng);
        m.forward_rows(&s).unwrap();
        m.forward_rows(&s).unwrap();
        assert_eq!(m.evaluations(), 2);
    }
}
