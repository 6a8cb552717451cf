use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cosine_lr, clip_grad_norm, mix_seed, predictions, AdamW, Model, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{make_batches, BatchedGraphs, Dataset, Fold, GraphInstance};
use crate::solver::{BackwardReport, SolveReport};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Mean forward solver iterations per batch.
    pub forward_iterations: f64,
    pub backward_iterations: f64,
    pub forward_nonconverged: usize,
    pub backward_nonconverged: usize,
    /// Batches dropped because the forward solve diverged.
    pub skipped_batches: usize,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub forward_iterations: f64,
    pub max_residual: f64,
    pub nonconverged: usize,
    pub graphs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub test: Evaluation,
}

impl RunMetrics {
    pub fn skipped_batches(&self) -> usize {
        self.epochs.iter().map(|e| e.skipped_batches).sum()
    }
}

/// Model together with its optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let params = model.params();
        let shapes: Vec<_> = params.iter().map(|(_, _, t)| t.shape()).collect();
        let decay: Vec<bool> = params.iter().map(|(_, k, _)| k.decays()).collect();
        Self {
            optimizer: AdamW::new(cfg.adamw(), &shapes, decay),
            model,
            epoch: 0,
        }
    }

    /// One optimizer step on `batch`. Returns `None` when the forward solve
    /// diverged or the gradient was not finite, in which case nothing changes.
    pub fn step(&mut self, batch: &BatchedGraphs, cfg: &TrainConfig, lr: f64, dropout_seed: u64) -> Result<Option<StepSummary>> {
        if let Some(q) = &mut self.model.op.quantum {
            q.spectral_step();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut out = match self.model.loss_and_grad(batch, Some(&mut rng)) {
            Ok(o) => o,
            Err(Error::Diverged { iteration }) => {
                log::warn!("forward solve diverged at iteration {iteration}; batch skipped");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let grad_norm = clip_grad_norm(&mut out.grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            log::warn!("non-finite gradient; batch skipped");
            return Ok(None);
        }
        let mut params = self.model.params_mut();
        self.optimizer.step(&mut params, &out.grads, lr)?;
        self.model.op.clip();
        Ok(Some(StepSummary {
            loss: out.loss,
            logits: out.logits,
            forward: out.forward,
            backward: out.backward,
            grad_norm,
        }))
    }
}

#[derive(Clone, Debug)]
pub struct StepSummary {
    pub loss: f64,
    pub logits: Tensor,
    pub forward: SolveReport,
    pub backward: BackwardReport,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Runs one epoch over the training indices with a shuffled batch order.
pub fn train_epoch(
    state: &mut TrainState,
    graphs: &[GraphInstance],
    train: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let epoch = state.epoch;
    let lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min);
    let batches = make_batches(graphs, train, cfg.batch_size, Some(mix_seed(&[seed, epoch as u64, 0])))?;
    let mut m = EpochMetrics {
        epoch,
        lr,
        train_loss: 0.0,
        train_accuracy: 0.0,
        forward_iterations: 0.0,
        backward_iterations: 0.0,
        forward_nonconverged: 0,
        backward_nonconverged: 0,
        skipped_batches: 0,
        grad_norm: 0.0,
        seconds: 0.0,
    };
    let (mut seen, mut correct, mut used) = (0usize, 0usize, 0usize);
    for (b, batch) in batches.iter().enumerate() {
        let Some(out) = state.step(batch, cfg, lr, mix_seed(&[seed, epoch as u64, b as u64 + 1]))? else {
            m.skipped_batches += 1;
            continue;
        };
        used += 1;
        let n = batch.num_graphs();
        seen += n;
        m.train_loss += out.loss * n as f64;
        correct += predictions(&out.logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        m.forward_iterations += out.forward.iterations as f64;
        m.backward_iterations += out.backward.iterations as f64;
        m.forward_nonconverged += usize::from(!out.forward.converged);
        m.backward_nonconverged += usize::from(!out.backward.converged);
        m.grad_norm += out.grad_norm;
    }
    if seen > 0 {
        m.train_loss /= seen as f64;
        m.train_accuracy = correct as f64 / seen as f64;
    }
    if used > 0 {
        m.forward_iterations /= used as f64;
        m.backward_iterations /= used as f64;
        m.grad_norm /= used as f64;
    }
    state.epoch += 1;
    m.seconds = start.elapsed().as_secs_f64();
    Ok(m)
}

/// Loss and accuracy on `indices` without dropout.
pub fn evaluate(model: &Model, graphs: &[GraphInstance], indices: &[usize], batch_size: usize) -> Result<Evaluation> {
    let mut e = Evaluation {
        loss: 0.0,
        accuracy: 0.0,
        forward_iterations: 0.0,
        max_residual: 0.0,
        nonconverged: 0,
        graphs: indices.len(),
    };
    if indices.is_empty() {
        return Ok(e);
    }
    let batches = make_batches(graphs, indices, batch_size, None)?;
    let mut correct = 0;
    for batch in &batches {
        let out = model.forward(batch)?;
        e.loss += super::cross_entropy_value(&out.logits, &batch.labels) * batch.num_graphs() as f64;
        correct += predictions(&out.logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        e.forward_iterations += out.forward.iterations as f64;
        e.max_residual = e.max_residual.max(out.forward.residual);
        e.nonconverged += usize::from(!out.forward.converged);
    }
    e.loss /= indices.len() as f64;
    e.accuracy = correct as f64 / indices.len() as f64;
    e.forward_iterations /= batches.len() as f64;
    Ok(e)
}

/// Trains a freshly initialized model on `fold.train` and evaluates it on
/// `fold.test`.
pub fn train_run(
    dataset: &Dataset,
    fold: &Fold,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model, RunMetrics)> {
    train_cfg.validate()?;
    let model = Model::new(model_cfg.clone(), dataset.num_features, dataset.num_classes, seed)?;
    let mut state = TrainState::new(model, train_cfg);
    let mut epochs = Vec::with_capacity(train_cfg.epochs);
    for _ in 0..train_cfg.epochs {
        let m = train_epoch(&mut state, &dataset.graphs, &fold.train, train_cfg, seed)?;
        log::debug!(
            "epoch {} loss {:.4} acc {:.3} fwd {:.1}",
            m.epoch,
            m.train_loss,
            m.train_accuracy,
            m.forward_iterations
        );
        epochs.push(m);
    }
    let test = evaluate(&state.model, &dataset.graphs, &fold.test, train_cfg.batch_size)?;
    Ok((state.model, RunMetrics { epochs, test }))
}
