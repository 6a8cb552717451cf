use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `Linear -> ReLU -> Dropout -> Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        let b1 = 1.0 / (d_in as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w1: Tensor::uniform(hidden, d_in, b1, rng),
            b1: Tensor::uniform(1, hidden, b1, rng),
            w2: Tensor::uniform(d_out, hidden, b2, rng),
            b2: Tensor::uniform(1, d_out, b2, rng),
            dropout,
        })
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        MlpVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
        }
    }

    /// With `rng` present, inverted dropout is applied to the hidden layer.
    pub fn apply<R: Rng + ?Sized>(&self, tape: &mut Tape, vars: &MlpVars, x: Var, rng: Option<&mut R>) -> Result<Var> {
        let h = tape.matmul_t(x, vars.w1)?;
        let h = tape.add_row(h, vars.b1)?;
        let mut h = tape.relu(h)?;
        if let Some(rng) = rng {
            if self.dropout > 0.0 {
                let (r, c) = tape.shape(h);
                let keep = 1.0 - self.dropout;
                let mask: Vec<f64> = (0..r * c)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = tape.constant(Tensor::from_vec(r, c, mask)?);
                h = tape.mul(h, m)?;
            }
        }
        let out = tape.matmul_t(h, vars.w2)?;
        tape.add_row(out, vars.b2)
    }
}
