use num_complex::Complex64;

/// Single-qubit Pauli axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn symbol(self) -> char {
        match self {
            Axis::X => 'X',
            Axis::Y => 'Y',
            Axis::Z => 'Z',
        }
    }
}

/// Pure state of `n` qubits; qubit `j` is bit `j` of the basis index.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    /// `|0...0>`
    pub fn zero(n_qubits: usize) -> Self {
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amps[0] = Complex64::new(1.0, 0.0);
        Self { n_qubits, amps }
    }

    /// Computational basis state `|index>`.
    pub fn basis(n_qubits: usize, index: usize) -> Self {
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amps[index] = Complex64::new(1.0, 0.0);
        Self { n_qubits, amps }
    }

    pub fn from_amplitudes(n_qubits: usize, amps: Vec<Complex64>) -> Self {
        assert_eq!(amps.len(), 1 << n_qubits);
        Self { n_qubits, amps }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `<self|other>`
    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// `P|psi>` for the Pauli string `P` acting on the listed qubits.
    pub fn apply_pauli(&self, ops: &[(Axis, usize)]) -> StateVector {
        let mut cur = self.amps.clone();
        let mut next = vec![Complex64::new(0.0, 0.0); cur.len()];
        for &(axis, q) in ops {
            pauli_into(&cur, &mut next, axis, q);
            std::mem::swap(&mut cur, &mut next);
        }
        StateVector {
            n_qubits: self.n_qubits,
            amps: cur,
        }
    }

    /// `exp(-i theta P / 2)|psi> = cos(theta/2)|psi> - i sin(theta/2) P|psi>`.
    pub fn rotate(&mut self, ops: &[(Axis, usize)], theta: f64) {
        let p = self.apply_pauli(ops);
        let (s, c) = (theta / 2.0).sin_cos();
        let minus_i_s = Complex64::new(0.0, -s);
        for (a, pa) in self.amps.iter_mut().zip(&p.amps) {
            *a = *a * c + pa * minus_i_s;
        }
    }

    /// `<Z_j>` for every qubit.
    pub fn z_expectations(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_qubits];
        for (idx, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            for (j, mj) in m.iter_mut().enumerate() {
                if idx >> j & 1 == 0 {
                    *mj += p;
                } else {
                    *mj -= p;
                }
            }
        }
        m
    }

    /// `(sum_j w_j Z_j)|psi>`; the observable is diagonal.
    pub fn weighted_z(&self, weights: &[f64]) -> StateVector {
        let amps = self
            .amps
            .iter()
            .enumerate()
            .map(|(idx, a)| {
                let s: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(j, w)| if idx >> j & 1 == 0 { *w } else { -*w })
                    .sum();
                a * s
            })
            .collect();
        StateVector {
            n_qubits: self.n_qubits,
            amps,
        }
    }
}

fn pauli_into(src: &[Complex64], dst: &mut [Complex64], axis: Axis, q: usize) {
    let mask = 1usize << q;
    let i = Complex64::new(0.0, 1.0);
    for (idx, a) in src.iter().enumerate() {
        let bit = idx & mask != 0;
        match axis {
            Axis::X => dst[idx ^ mask] = *a,
            // Y|0> = i|1>, Y|1> = -i|0>
            Axis::Y => dst[idx ^ mask] = if bit { -i * a } else { i * a },
            Axis::Z => dst[idx] = if bit { -a } else { *a },
        }
    }
}
