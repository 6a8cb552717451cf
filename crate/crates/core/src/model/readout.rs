use std::ops::Range;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-head self-attention within each graph followed by a sum over nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReadout {
    pub heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ReadoutVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionReadout {
    pub fn random<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden dim {d} not divisible by {heads} heads"
            )));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut w = || Tensor::uniform(d, d, bound, rng);
        Ok(Self {
            heads,
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
            bq: Tensor::zeros(1, d),
            bk: Tensor::zeros(1, d),
            bv: Tensor::zeros(1, d),
            bo: Tensor::zeros(1, d),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ReadoutVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ReadoutVars {
            wq: put(&self.wq),
            bq: put(&self.bq),
            wk: put(&self.wk),
            bk: put(&self.bk),
            wv: put(&self.wv),
            bv: put(&self.bv),
            wo: put(&self.wo),
            bo: put(&self.bo),
        }
    }

    /// One `1 x d` row per graph, stacked in range order.
    pub fn apply(&self, tape: &mut Tape, vars: &ReadoutVars, z: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let d = self.dim();
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let proj = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
            let x = tape.matmul_t(z, w)?;
            tape.add_row(x, b)
        };
        let q = proj(tape, vars.wq, vars.bq)?;
        let k = proj(tape, vars.wk, vars.bk)?;
        let v = proj(tape, vars.wv, vars.bv)?;
        let mut pooled = Vec::with_capacity(ranges.len());
        for r in ranges {
            if r.is_empty() {
                return Err(Error::InvalidArgument("empty graph in readout".into()));
            }
            let (qg, kg, vg) = (
                tape.slice_rows(q, r.start, r.end)?,
                tape.slice_rows(k, r.start, r.end)?,
                tape.slice_rows(v, r.start, r.end)?,
            );
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (a, b) = (h * dk, (h + 1) * dk);
                let qh = tape.slice_cols(qg, a, b)?;
                let kh = tape.slice_cols(kg, a, b)?;
                let vh = tape.slice_cols(vg, a, b)?;
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, scale)?;
                let attn = tape.softmax_rows(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let out = tape.matmul_t(cat, vars.wo)?;
            let out = tape.add_row(out, vars.bo)?;
            pooled.push(tape.sum_rows(out)?);
        }
        tape.concat_rows(&pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pooled(r: &AttentionReadout, z: &Tensor, ranges: &[Range<usize>]) -> Tensor {
        let mut tape = Tape::new();
        let vars = r.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = r.apply(&mut tape, &vars, zv, ranges).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn single_node_graph_is_its_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = AttentionReadout::random(8, 4, &mut rng).unwrap();
        let z = Tensor::randn(1, 8, &mut rng);
        let got = pooled(&r, &z, &[0..1]);
        let v = z.matmul_t(&r.wv).unwrap().add_row(&r.bv).unwrap();
        let want = v.matmul_t(&r.wo).unwrap().add_row(&r.bo).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn node_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = AttentionReadout::random(8, 2, &mut rng).unwrap();
        let z = Tensor::randn(5, 8, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let a = pooled(&r, &z, &[0..5]);
        let b = pooled(&r, &z.permute_rows(&perm), &[0..5]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_graphs_match_single_graphs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = AttentionReadout::random(8, 4, &mut rng).unwrap();
        let z1 = Tensor::randn(3, 8, &mut rng);
        let z2 = Tensor::randn(4, 8, &mut rng);
        let both = pooled(&r, &Tensor::concat_rows(&[&z1, &z2]).unwrap(), &[0..3, 3..7]);
        assert_eq!(both.row(0), pooled(&r, &z1, &[0..3]).row(0));
        assert_eq!(both.row(1), pooled(&r, &z2, &[0..4]).row(0));
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(AttentionReadout::random(6, 4, &mut rng).is_err());
    }
}
