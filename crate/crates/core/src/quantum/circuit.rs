//! The "Deep XYZ" circuit and its adjoint gradients.
//!
//! One repetition consists of three trainable blocks. The input `u` enters
//! through `R_y(u_j)` layers: once at the start ([`Encoding::Once`]) or
//! before every block ([`Encoding::PerBlock`], data re-uploading).
//!
//! | block | rotations per qubit | entangler on `(j, j+1)` |
//! |-------|---------------------|-------------------------|
//! | 1     | `R_x R_y R_z`       | `ZZ`                    |
//! | 2     | `R_x R_y`           | `XX`                    |
//! | 3     | `R_y R_z`           | `YY`                    |
//!
//! All gates are `exp(-i theta P / 2)` for a Pauli string `P`, so every
//! angle obeys the two-term parameter-shift rule.

use std::fmt::Write as _;

use super::state::{Axis, StateVector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Rot(Axis, usize),
    Ising(Axis, usize, usize),
}

impl GateKind {
    fn paulis(&self) -> ([(Axis, usize); 2], usize) {
        match *self {
            GateKind::Rot(a, q) => ([(a, q), (a, q)], 1),
            GateKind::Ising(a, p, q) => ([(a, p), (a, q)], 2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AngleSource {
    /// Trainable angle `params[i]`.
    Param(usize),
    /// Data angle `u[j]`.
    Input(usize),
}

/// Where the data angles enter the circuit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Encoding {
    /// A single `R_y(u)` layer before the first block.
    Once,
    /// An `R_y(u)` layer before each of the three blocks of every repetition.
    PerBlock,
}

impl Encoding {
    pub fn as_str(self) -> &'static str {
        match self {
            Encoding::Once => "once",
            Encoding::PerBlock => "per-block",
        }
    }

    /// Number of encoding layers in a circuit with `repetitions` repetitions.
    pub fn layers(self, repetitions: usize) -> usize {
        match self {
            Encoding::Once => usize::from(repetitions > 0),
            Encoding::PerBlock => 3 * repetitions,
        }
    }
}

impl std::fmt::Display for Encoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "once" => Ok(Encoding::Once),
            "per-block" => Ok(Encoding::PerBlock),
            other => Err(Error::InvalidArgument(format!(
                "unknown encoding '{other}' (expected once or per-block)"
            ))),
        }
    }
}

impl serde::Serialize for Encoding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for Encoding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gate {
    pub kind: GateKind,
    pub angle: AngleSource,
}

/// Trainable angles of a Deep XYZ circuit.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepXyzParams {
    pub n_qubits: usize,
    pub repetitions: usize,
    pub angles: Vec<f64>,
}

impl DeepXyzParams {
    pub fn per_repetition(n_qubits: usize) -> usize {
        7 * n_qubits + 3 * n_qubits.saturating_sub(1)
    }

    pub fn new(n_qubits: usize, repetitions: usize, angles: Vec<f64>) -> Result<Self> {
        let want = Self::per_repetition(n_qubits) * repetitions;
        if angles.len() != want {
            return Err(Error::InvalidArgument(format!(
                "Deep XYZ with {n_qubits} qubits x {repetitions} repetitions needs {want} angles, got {}",
                angles.len()
            )));
        }
        Ok(Self {
            n_qubits,
            repetitions,
            angles,
        })
    }

    pub fn zeros(n_qubits: usize, repetitions: usize) -> Self {
        Self {
            n_qubits,
            repetitions,
            angles: vec![0.0; Self::per_repetition(n_qubits) * repetitions],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    n_qubits: usize,
    num_params: usize,
    gates: Vec<Gate>,
    encoding: Encoding,
    /// Number of leading gates forming the initial encoding layer.
    encoding_prefix: usize,
}

impl Circuit {
    pub fn deep_xyz(n_qubits: usize, repetitions: usize, encoding: Encoding) -> Self {
        let mut gates = Vec::new();
        let mut p = 0;
        let param = |p: &mut usize| {
            let s = AngleSource::Param(*p);
            *p += 1;
            s
        };
        let blocks: [(&[Axis], Axis); 3] = [
            (&[Axis::X, Axis::Y, Axis::Z], Axis::Z),
            (&[Axis::X, Axis::Y], Axis::X),
            (&[Axis::Y, Axis::Z], Axis::Y),
        ];
        for rep in 0..repetitions {
            for (b, (rotations, entangler)) in blocks.into_iter().enumerate() {
                if encoding == Encoding::PerBlock || (rep == 0 && b == 0) {
                    for q in 0..n_qubits {
                        gates.push(Gate {
                            kind: GateKind::Rot(Axis::Y, q),
                            angle: AngleSource::Input(q),
                        });
                    }
                }
                for q in 0..n_qubits {
                    for &axis in rotations {
                        gates.push(Gate {
                            kind: GateKind::Rot(axis, q),
                            angle: param(&mut p),
                        });
                    }
                }
                for q in 0..n_qubits.saturating_sub(1) {
                    gates.push(Gate {
                        kind: GateKind::Ising(entangler, q, q + 1),
                        angle: param(&mut p),
                    });
                }
            }
        }
        Self {
            n_qubits,
            num_params: p,
            gates,
            encoding,
            encoding_prefix: if repetitions > 0 { n_qubits } else { 0 },
        }
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    fn angle(&self, g: &Gate, params: &[f64], u: &[f64]) -> f64 {
        match g.angle {
            AngleSource::Param(i) => params[i],
            AngleSource::Input(j) => u[j],
        }
    }

    fn check(&self, params: &[f64], u: &[f64]) -> Result<()> {
        if params.len() != self.num_params {
            return Err(Error::InvalidArgument(format!(
                "circuit expects {} parameters, got {}",
                self.num_params,
                params.len()
            )));
        }
        if u.len() != self.n_qubits {
            return Err(Error::InvalidArgument(format!(
                "circuit expects {} data angles, got {}",
                self.n_qubits,
                u.len()
            )));
        }
        Ok(())
    }

    fn run_from(&self, mut state: StateVector, start: usize, params: &[f64], u: &[f64]) -> StateVector {
        for g in &self.gates[start..] {
            let (ops, k) = g.kind.paulis();
            state.rotate(&ops[..k], self.angle(g, params, u));
        }
        state
    }

    /// Full map `u -> U(params; u)|0...0>`.
    pub fn run(&self, params: &[f64], u: &[f64]) -> Result<StateVector> {
        self.check(params, u)?;
        Ok(self.run_from(StateVector::zero(self.n_qubits), 0, params, u))
    }

    /// Applies everything after the initial encoding layer to `state`.
    pub fn run_after_encoding(&self, state: StateVector, params: &[f64], u: &[f64]) -> Result<StateVector> {
        self.check(params, u)?;
        if state.n_qubits() != self.n_qubits {
            return Err(Error::InvalidArgument(format!(
                "state has {} qubits, circuit {}",
                state.n_qubits(),
                self.n_qubits
            )));
        }
        Ok(self.run_from(state, self.encoding_prefix, params, u))
    }

    /// Adjoint-mode gradient of `sum_j cot[j] <Z_j>` with respect to the
    /// trainable angles and the data angles, given the final state.
    pub fn adjoint_grad(
        &self,
        params: &[f64],
        u: &[f64],
        final_state: &StateVector,
        cot: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut psi = final_state.clone();
        let mut lambda = final_state.weighted_z(cot);
        let mut g_params = vec![0.0; self.num_params];
        let mut g_u = vec![0.0; self.n_qubits];
        for g in self.gates.iter().rev() {
            let (ops, k) = g.kind.paulis();
            let ops = &ops[..k];
            let d = lambda.inner(&psi.apply_pauli(ops)).im;
            match g.angle {
                AngleSource::Param(i) => g_params[i] += d,
                AngleSource::Input(j) => g_u[j] += d,
            }
            let theta = self.angle(g, params, u);
            psi.rotate(ops, -theta);
            lambda.rotate(ops, -theta);
        }
        (g_params, g_u)
    }

    /// Human-readable gate list, one gate per line.
    pub fn describe(&self, params: &[f64], u: Option<&[f64]>) -> String {
        let mut out = String::new();
        for g in &self.gates {
            let name = match g.kind {
                GateKind::Rot(a, q) => format!("R{}(q{q})", a.symbol().to_ascii_lowercase()),
                GateKind::Ising(a, p, q) => format!("{0}{0}(q{p},q{q})", a.symbol()),
            };
            let angle = match (g.angle, u) {
                (AngleSource::Param(i), _) => format!("eta[{i}] = {}", params[i]),
                (AngleSource::Input(j), Some(u)) => format!("u[{j}] = {}", u[j]),
                (AngleSource::Input(j), None) => format!("u[{j}]"),
            };
            let _ = writeln!(out, "{name} {angle}");
        }
        out
    }
}

/// `R_y(u_j)` on every qubit of `|0...0>`. Angles must lie in `(-1, 1)`.
pub fn angle_encode(u: &[f64]) -> Result<StateVector> {
    if let Some(bad) = u.iter().find(|v| !(v.abs() < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "encoding angle {bad} outside (-1, 1)"
        )));
    }
    let mut s = StateVector::zero(u.len());
    for (q, &a) in u.iter().enumerate() {
        s.rotate(&[(Axis::Y, q)], a);
    }
    Ok(s)
}

/// Runs everything after the initial encoding layer (trainable blocks and,
/// for [`Encoding::PerBlock`], the later encodings) on a state produced by
/// [`angle_encode`].
pub fn apply_deep_xyz(
    state: StateVector,
    params: &DeepXyzParams,
    encoding: Encoding,
    u: &[f64],
) -> Result<StateVector> {
    if state.n_qubits() != params.n_qubits {
        return Err(Error::InvalidArgument(format!(
            "state has {} qubits, parameters {}",
            state.n_qubits(),
            params.n_qubits
        )));
    }
    let circuit = Circuit::deep_xyz(params.n_qubits, params.repetitions, encoding);
    circuit.run_after_encoding(state, &params.angles, u)
}

pub fn pauli_z_expectations(state: &StateVector) -> Vec<f64> {
    state.z_expectations()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count_matches_layout() {
        assert_eq!(DeepXyzParams::per_repetition(4), 37);
        assert_eq!(Circuit::deep_xyz(4, 1, Encoding::PerBlock).num_params(), 37);
        assert_eq!(Circuit::deep_xyz(3, 2, Encoding::Once).num_params(), 2 * (21 + 6));
        assert!(DeepXyzParams::new(4, 1, vec![0.0; 36]).is_err());
    }

    #[test]
    fn encoding_layer_counts() {
        let inputs = |c: &Circuit| {
            c.gates()
                .iter()
                .filter(|g| matches!(g.angle, AngleSource::Input(_)))
                .count()
        };
        assert_eq!(inputs(&Circuit::deep_xyz(2, 2, Encoding::PerBlock)), 2 * 3 * 2);
        assert_eq!(inputs(&Circuit::deep_xyz(2, 2, Encoding::Once)), 2);
        assert_eq!(Encoding::PerBlock.layers(2), 6);
        assert_eq!(Encoding::Once.layers(2), 1);
        for e in [Encoding::Once, Encoding::PerBlock] {
            assert_eq!(e.as_str().parse::<Encoding>().unwrap(), e);
        }
    }

    #[test]
    fn zero_input_encodes_ground_state() {
        let s = angle_encode(&[0.0; 3]).unwrap();
        assert_eq!(s, StateVector::zero(3));
        assert_eq!(s.z_expectations(), vec![1.0; 3]);
    }

    #[test]
    fn encoding_rejects_out_of_range_angle() {
        assert!(angle_encode(&[0.2, 1.0]).is_err());
        assert!(angle_encode(&[f64::NAN]).is_err());
    }

    #[test]
    fn encoding_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.999..0.999)).collect();
            assert!((angle_encode(&u).unwrap().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_angles_leave_state_unchanged() {
        let s = angle_encode(&[0.0; 3]).unwrap();
        let out = apply_deep_xyz(s.clone(), &DeepXyzParams::zeros(3, 1), Encoding::PerBlock, &[0.0; 3]).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn random_circuits_preserve_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = Circuit::deep_xyz(4, 2, Encoding::PerBlock);
            let params: Vec<f64> = (0..c.num_params()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.99..0.99)).collect();
            let s = c.run(&params, &u).unwrap();
            assert!((s.norm() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_superposition_has_zero_z() {
        let mut s = StateVector::zero(3);
        for q in 0..3 {
            s.rotate(&[(Axis::Y, q)], std::f64::consts::FRAC_PI_2);
        }
        for m in pauli_z_expectations(&s) {
            assert!(m.abs() < 1e-12);
        }
    }

    // Dense 4x4 oracle: every gate written out as an explicit matrix and
    // multiplied in order, independent of the Pauli-rotation kernel.
    type M4 = [[Complex64; 4]; 4];

    fn kron(a: [[Complex64; 2]; 2], b: [[Complex64; 2]; 2]) -> M4 {
        // qubit 1 is the high bit, qubit 0 the low bit
        let mut m = [[Complex64::new(0.0, 0.0); 4]; 4];
        for i1 in 0..2 {
            for j1 in 0..2 {
                for i0 in 0..2 {
                    for j0 in 0..2 {
                        m[i1 * 2 + i0][j1 * 2 + j0] = a[i1][j1] * b[i0][j0];
                    }
                }
            }
        }
        m
    }

    fn single(axis: Axis, theta: f64) -> [[Complex64; 2]; 2] {
        let c = Complex64::new((theta / 2.0).cos(), 0.0);
        let s = (theta / 2.0).sin();
        match axis {
            Axis::X => [[c, Complex64::new(0.0, -s)], [Complex64::new(0.0, -s), c]],
            Axis::Y => [[c, Complex64::new(-s, 0.0)], [Complex64::new(s, 0.0), c]],
            Axis::Z => [
                [Complex64::new((theta / 2.0).cos(), -s), Complex64::new(0.0, 0.0)],
                [Complex64::new(0.0, 0.0), Complex64::new((theta / 2.0).cos(), s)],
            ],
        }
    }

    fn eye2() -> [[Complex64; 2]; 2] {
        [
            [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
        ]
    }

    fn ising(axis: Axis, theta: f64) -> M4 {
        let p: [[Complex64; 2]; 2] = match axis {
            Axis::X => [
                [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
                [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            ],
            Axis::Y => [
                [Complex64::new(0.0, 0.0), Complex64::new(0.0, -1.0)],
                [Complex64::new(0.0, 1.0), Complex64::new(0.0, 0.0)],
            ],
            Axis::Z => [
                [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
                [Complex64::new(0.0, 0.0), Complex64::new(-1.0, 0.0)],
            ],
        };
        let pp = kron(p, p);
        let mut m = [[Complex64::new(0.0, 0.0); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let id = if i == j { 1.0 } else { 0.0 };
                m[i][j] = Complex64::new((theta / 2.0).cos() * id, 0.0)
                    - Complex64::new(0.0, (theta / 2.0).sin()) * pp[i][j];
            }
        }
        m
    }

    fn apply(m: &M4, v: &[Complex64; 4]) -> [Complex64; 4] {
        let mut out = [Complex64::new(0.0, 0.0); 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i] += m[i][j] * v[j];
            }
        }
        out
    }

    fn dense_oracle_case(per_block: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params: Vec<f64> = (0..DeepXyzParams::per_repetition(2))
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        let u = [0.37, -0.81];

        let mut v = [Complex64::new(0.0, 0.0); 4];
        v[0] = Complex64::new(1.0, 0.0);
        let on = |q: usize, m: [[Complex64; 2]; 2]| if q == 0 { kron(eye2(), m) } else { kron(m, eye2()) };
        let blocks: [(&[Axis], Axis); 3] = [
            (&[Axis::X, Axis::Y, Axis::Z], Axis::Z),
            (&[Axis::X, Axis::Y], Axis::X),
            (&[Axis::Y, Axis::Z], Axis::Y),
        ];
        let mut p = 0;
        for (b, (rots, ent)) in blocks.into_iter().enumerate() {
            if per_block || b == 0 {
                for q in 0..2 {
                    v = apply(&on(q, single(Axis::Y, u[q])), &v);
                }
            }
            for q in 0..2 {
                for &a in rots {
                    v = apply(&on(q, single(a, params[p])), &v);
                    p += 1;
                }
            }
            v = apply(&ising(ent, params[p]), &v);
            p += 1;
        }

        let params = DeepXyzParams::new(2, 1, params).unwrap();
        let enc = if per_block { Encoding::PerBlock } else { Encoding::Once };
        let s = apply_deep_xyz(angle_encode(&u).unwrap(), &params, enc, &u).unwrap();
        for (a, b) in s.amplitudes().iter().zip(v.iter()) {
            assert!((a - b).norm() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn two_qubit_circuit_matches_dense_oracle() {
        dense_oracle_case(true);
        dense_oracle_case(false);
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = Circuit::deep_xyz(3, 1, Encoding::PerBlock);
        let params: Vec<f64> = (0..c.num_params()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let cot = [0.3, -1.2, 0.7];
        let f = |p: &[f64], u: &[f64]| -> f64 {
            let m = c.run(p, u).unwrap().z_expectations();
            m.iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let s = c.run(&params, &u).unwrap();
        let (gp, gu) = c.adjoint_grad(&params, &u, &s, &cot);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut pp = params.clone();
            pp[i] += h;
            let mut pm = params.clone();
            pm[i] -= h;
            let fd = (f(&pp, &u) - f(&pm, &u)) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-8, "param {i}: {fd} vs {}", gp[i]);
        }
        for j in 0..3 {
            let mut up = u.clone();
            up[j] += h;
            let mut um = u.clone();
            um[j] -= h;
            let fd = (f(&params, &up) - f(&params, &um)) / (2.0 * h);
            assert!((fd - gu[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn describe_lists_every_gate() {
        let c = Circuit::deep_xyz(2, 1, Encoding::Once);
        let text = c.describe(&vec![0.0; c.num_params()], None);
        assert_eq!(text.lines().count(), c.gates().len());
        assert!(text.contains("ZZ(q0,q1)"));
    }
}
