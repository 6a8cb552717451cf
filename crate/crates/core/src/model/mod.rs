//! Graph classifier: linear encoder, equilibrium layer, attention pooling and
//! an MLP head, trained through the fixed point by implicit differentiation.

mod checkpoint;
mod cv;
mod mlp;
mod optim;
mod readout;
mod train;

pub use checkpoint::{config_hash, Checkpoint};
pub use cv::{cross_validate, RunResult};
pub use mlp::{Mlp, MlpVars};
pub use optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
pub use readout::{AttentionReadout, ReadoutVars};
pub use train::{evaluate, train_epoch, train_run, EpochMetrics, Evaluation, RunMetrics, StepSummary, TrainState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{descriptor_dim, BatchedGraphs, DEFAULT_MAX_CYCLE_LEN};
use crate::operators::{InjectedOperator, OperatorConfig, Pathway, Prepared};
use crate::quantum::Encoding;
use crate::solver::{implicit_backward, solve, BackwardReport, SolveReport, SolverConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub pathway: Pathway,
    pub hidden_dim: usize,
    pub n_qubits: usize,
    pub repetitions: usize,
    pub encoding: Encoding,
    pub alpha: f64,
    pub kappa: f64,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub max_cycle_len: usize,
    pub forward: SolverConfig,
    pub backward: SolverConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pathway: Pathway::Id,
            hidden_dim: 64,
            n_qubits: 4,
            repetitions: 1,
            encoding: Encoding::Once,
            alpha: 0.1,
            kappa: 0.8,
            heads: 4,
            mlp_hidden: 64,
            dropout: 0.4,
            max_cycle_len: DEFAULT_MAX_CYCLE_LEN,
            forward: SolverConfig::forward(),
            backward: SolverConfig::backward(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.pathway.is_quantum() && (self.n_qubits == 0 || self.n_qubits > 16) {
            return Err(Error::Config(format!("n_qubits must lie in 1..=16, got {}", self.n_qubits)));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.kappa) {
            return Err(Error::Config(format!("kappa must lie in [0, 1), got {}", self.kappa)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.max_cycle_len < 3 {
            return Err(Error::Config("max_cycle_len must be at least 3".into()));
        }
        self.forward.validate()?;
        self.backward.validate()
    }

    pub fn tau_dim(&self) -> usize {
        descriptor_dim(self.max_cycle_len)
    }

    fn operator_config(&self) -> OperatorConfig {
        OperatorConfig {
            pathway: self.pathway,
            hidden_dim: self.hidden_dim,
            tau_dim: self.tau_dim(),
            n_qubits: self.n_qubits,
            repetitions: self.repetitions,
            encoding: self.encoding,
            alpha: self.alpha,
            kappa: self.kappa,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_min: 0.0,
            weight_decay: 1e-4,
            epochs: 200,
            batch_size: 32,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr, got {} and {}",
                self.lr_min, self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("grad_clip must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// How a parameter tensor is treated by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Angles,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub num_features: usize,
    pub num_classes: usize,
    /// `d_h x f`, so `H = X E^T`.
    pub encoder: Tensor,
    pub op: InjectedOperator,
    pub readout: AttentionReadout,
    pub head: Mlp,
}

/// Output of one differentiated pass over a batch.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub logits: Tensor,
    /// One gradient per parameter, in [`Model::param_names`] order.
    pub grads: Vec<Tensor>,
    pub forward: SolveReport,
    pub backward: BackwardReport,
}

/// Inference result for a batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub forward: SolveReport,
}

impl Model {
    pub fn new(config: ModelConfig, num_features: usize, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_features == 0 || num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least one feature and two classes, got {num_features} and {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let encoder = Tensor::uniform(d, num_features, 1.0 / (num_features as f64).sqrt(), &mut rng);
        let op = InjectedOperator::random(&config.operator_config(), &mut rng)?;
        let readout = AttentionReadout::random(d, config.heads, &mut rng)?;
        let head = Mlp::random(d, config.mlp_hidden, num_classes, config.dropout, &mut rng)?;
        Ok(Self {
            config,
            num_features,
            num_classes,
            encoder,
            op,
            readout,
            head,
        })
    }

    /// Parameter tensors with their names and optimizer treatment, in a
    /// fixed order.
    pub fn params(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = vec![
            ("encoder.e".to_string(), ParamKind::Weight, &self.encoder),
            ("backbone.w".to_string(), ParamKind::Weight, &self.op.backbone.w),
            ("backbone.omega".to_string(), ParamKind::Weight, &self.op.backbone.omega),
            ("backbone.b".to_string(), ParamKind::Bias, &self.op.backbone.b),
        ];
        if let Some(q) = &self.op.quantum {
            out.push(("quantum.w_in".into(), ParamKind::Weight, &q.w_in));
            out.push(("quantum.w_out".into(), ParamKind::Weight, &q.w_out));
            out.push(("quantum.angles".into(), ParamKind::Angles, &q.angles));
        }
        for (n, t) in self.readout.named() {
            out.push((format!("readout.{n}"), kind_of(n), t));
        }
        for (n, t) in self.head.named() {
            out.push((format!("mlp.{n}"), kind_of(n), t));
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.encoder,
            &mut self.op.backbone.w,
            &mut self.op.backbone.omega,
            &mut self.op.backbone.b,
        ];
        if let Some(q) = &mut self.op.quantum {
            out.push(&mut q.w_in);
            out.push(&mut q.w_out);
            out.push(&mut q.angles);
        }
        out.extend(self.readout.named_mut().into_iter().map(|(_, t)| t));
        out.extend(self.head.named_mut().into_iter().map(|(_, t)| t));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.len()).sum()
    }

    fn check_batch(&self, batch: &BatchedGraphs) -> Result<()> {
        if batch.features.cols() != self.num_features {
            return Err(Error::Shape {
                op: "model input",
                lhs: batch.features.shape(),
                rhs: self.encoder.shape(),
            });
        }
        if batch.descriptors.cols() != self.config.tau_dim() {
            return Err(Error::Shape {
                op: "topology descriptors",
                lhs: batch.descriptors.shape(),
                rhs: (batch.num_nodes(), self.config.tau_dim()),
            });
        }
        Ok(())
    }

    /// Logits without dropout.
    pub fn forward(&self, batch: &BatchedGraphs) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.features.clone());
        let tau = tape.constant(batch.descriptors.clone());
        let e = tape.constant(self.encoder.clone());
        let ov = self.op.bind_constants(&mut tape);
        let h = tape.matmul_t(x, e)?;
        let c = self.op.injection_on_tape(&mut tape, &ov, h, tau)?;
        let forward = self.solve(batch, tape.value(c).clone())?;
        let z = tape.constant(forward.solution.clone());
        let rv = self.readout.bind(&mut tape, false);
        let mv = self.head.bind(&mut tape, false);
        let pooled = self.readout.apply(&mut tape, &rv, z, &batch.ranges)?;
        let logits = self.head.apply(&mut tape, &mv, pooled, None::<&mut ChaCha8Rng>)?;
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            forward,
        })
    }

    /// Mean cross-entropy of the batch without dropout.
    pub fn loss(&self, batch: &BatchedGraphs) -> Result<f64> {
        let out = self.forward(batch)?;
        Ok(cross_entropy_value(&out.logits, &batch.labels))
    }

    fn solve(&self, batch: &BatchedGraphs, injection: Tensor) -> Result<SolveReport> {
        let prepared = Prepared {
            propagation: batch.propagation.clone(),
            injection,
        };
        let z0 = Tensor::zeros(batch.num_nodes(), self.config.hidden_dim);
        solve(|z| self.op.apply_prepared(&prepared, z), &z0, &self.config.forward)
    }

    /// Loss, logits and parameter gradients for one batch. The forward solve
    /// runs outside the tape; gradients reach the operator through the
    /// adjoint fixed point `u = g + J^T u` at the equilibrium.
    pub fn loss_and_grad<R: Rng + ?Sized>(&self, batch: &BatchedGraphs, dropout: Option<&mut R>) -> Result<StepOutput> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.features.clone());
        let tau = tape.constant(batch.descriptors.clone());
        let e = tape.leaf(self.encoder.clone());
        let ov = self.op.bind(&mut tape);
        let h = tape.matmul_t(x, e)?;
        let c = self.op.injection_on_tape(&mut tape, &ov, h, tau)?;
        let forward = self.solve(batch, tape.value(c).clone())?;

        let z_in = tape.leaf(forward.solution.clone());
        let f = self.op.apply_on_tape(&mut tape, &ov, batch.propagation.clone(), c, z_in)?;

        let z_out = tape.leaf(forward.solution.clone());
        let rv = self.readout.bind(&mut tape, true);
        let mv = self.head.bind(&mut tape, true);
        let pooled = self.readout.apply(&mut tape, &rv, z_out, &batch.ranges)?;
        let logits = self.head.apply(&mut tape, &mv, pooled, dropout)?;
        let loss = cross_entropy(&mut tape, logits, &batch.labels, self.num_classes)?;

        let g_head = tape.backward(loss)?;
        let g = g_head.wrt(z_out);
        let backward = implicit_backward(
            |u| Ok(tape.vjp(f, u.clone(), &[z_in])?.wrt(z_in)),
            &g,
            &self.config.backward,
        )?;
        let g_op = tape.backward_from(f, backward.u.clone())?;

        let mut vars: Vec<Var> = vec![e, ov.w, ov.omega, ov.b];
        if let Some(q) = ov.quantum {
            vars.extend([q.w_in, q.w_out, q.angles]);
        }
        vars.extend([rv.wq, rv.bq, rv.wk, rv.bk, rv.wv, rv.bv, rv.wo, rv.bo]);
        vars.extend([mv.w1, mv.b1, mv.w2, mv.b2]);
        let grads = vars
            .into_iter()
            .map(|v| {
                let mut t = g_head.wrt(v);
                t.add_assign(&g_op.wrt(v))?;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(StepOutput {
            loss: tape.value(loss).get(0, 0),
            logits: tape.value(logits).clone(),
            grads,
            forward,
            backward,
        })
    }
}

fn kind_of(name: &str) -> ParamKind {
    if name.starts_with('b') {
        ParamKind::Bias
    } else {
        ParamKind::Weight
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!("label {y} outside 0..{classes}")));
        }
        t.set(i, y, 1.0);
    }
    Ok(t)
}

/// Mean cross-entropy over the rows of `logits`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], classes: usize) -> Result<Var> {
    let ls = tape.log_softmax_rows(logits)?;
    let y = tape.constant(one_hot(labels, classes)?);
    let picked = tape.mul(ls, y)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / labels.len() as f64)
}

pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Index of the largest logit per row; ties go to the lower class.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Deterministic 64-bit mixing of several integers into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphInstance;

    fn tiny_config(pathway: Pathway) -> ModelConfig {
        ModelConfig {
            pathway,
            hidden_dim: 8,
            n_qubits: 2,
            heads: 2,
            mlp_hidden: 6,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn path_graph(n: usize, label: usize) -> GraphInstance {
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let mut x = Tensor::zeros(n, 3);
        for i in 0..n {
            x.set(i, i % 3, 1.0);
        }
        GraphInstance::from_edges(n, &edges, x, label, DEFAULT_MAX_CYCLE_LEN).unwrap()
    }

    #[test]
    fn parameter_lists_line_up() {
        for pathway in Pathway::ALL {
            let mut m = Model::new(tiny_config(pathway), 3, 2, 0).unwrap();
            let names = m.param_names();
            let shapes: Vec<_> = m.params().iter().map(|(_, _, t)| t.shape()).collect();
            let mut_shapes: Vec<_> = m.params_mut().iter().map(|t| t.shape()).collect();
            assert_eq!(shapes, mut_shapes);
            assert_eq!(names.iter().any(|n| n.starts_with("quantum.")), pathway.is_quantum());
            let batch = BatchedGraphs::single(&path_graph(4, 1));
            let out = m.loss_and_grad(&batch, None::<&mut ChaCha8Rng>).unwrap();
            assert_eq!(out.grads.len(), names.len());
            for (g, s) in out.grads.iter().zip(&shapes) {
                assert_eq!(g.shape(), *s);
            }
        }
    }

    #[test]
    fn decay_exclusions() {
        let m = Model::new(tiny_config(Pathway::Sd), 3, 2, 0).unwrap();
        for (name, kind, _) in m.params() {
            let want = if name.ends_with("angles") {
                ParamKind::Angles
            } else if name.rsplit('.').next().unwrap().starts_with('b') {
                ParamKind::Bias
            } else {
                ParamKind::Weight
            };
            assert_eq!(kind, want, "{name}");
        }
    }

    #[test]
    fn loss_matches_logits() {
        let m = Model::new(tiny_config(Pathway::Id), 3, 2, 1).unwrap();
        let batch = BatchedGraphs::from_graphs(&[path_graph(3, 0), path_graph(5, 1)], &[0, 1]).unwrap();
        let out = m.loss_and_grad(&batch, None::<&mut ChaCha8Rng>).unwrap();
        let f = m.forward(&batch).unwrap();
        assert_eq!(out.logits, f.logits);
        assert!((out.loss - cross_entropy_value(&f.logits, &batch.labels)).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let l = Tensor::zeros(3, 4);
        assert!((cross_entropy_value(&l, &[0, 1, 3]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(predictions(&Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 2.0]])), vec![0, 1]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_heads = ModelConfig {
            heads: 3,
            ..tiny_config(Pathway::Classical)
        };
        assert!(Model::new(bad_heads, 3, 2, 0).is_err());
        let bad_kappa = ModelConfig {
            kappa: 1.0,
            ..tiny_config(Pathway::Classical)
        };
        assert!(bad_kappa.validate().is_err());
        assert!(Model::new(tiny_config(Pathway::Classical), 3, 1, 0).is_err());
    }

    #[test]
    fn seed_mixing_separates_inputs() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[7, 0, 3]), mix_seed(&[7, 0, 3]));
    }
}
