//! Backbone map and the four equilibrium operators built on it.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{LeftLinear, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::BlockDiagonal;
use crate::lipschitz::{spectral_norm, CLIP_POWER_ITERS, CLIP_POWER_TOL};
use crate::quantum::{Encoding, QuantumModule, QuantumVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pathway {
    Classical,
    Id,
    Sd,
    Bd,
}

impl Pathway {
    pub const ALL: [Pathway; 4] = [Pathway::Classical, Pathway::Id, Pathway::Sd, Pathway::Bd];

    pub fn as_str(self) -> &'static str {
        match self {
            Pathway::Classical => "classical",
            Pathway::Id => "id",
            Pathway::Sd => "sd",
            Pathway::Bd => "bd",
        }
    }

    pub fn is_quantum(self) -> bool {
        self != Pathway::Classical
    }
}

impl fmt::Display for Pathway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pathway {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classical" => Ok(Pathway::Classical),
            "id" => Ok(Pathway::Id),
            "sd" => Ok(Pathway::Sd),
            "bd" => Ok(Pathway::Bd),
            other => Err(Error::InvalidArgument(format!(
                "unknown pathway '{other}' (expected classical, id, sd or bd)"
            ))),
        }
    }
}

impl serde::Serialize for Pathway {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for Pathway {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Rescales `w` so its spectral-norm estimate is at most `kappa`.
pub fn clip_spectral(w: &Tensor, kappa: f64) -> Tensor {
    let s = spectral_norm(w, CLIP_POWER_ITERS, CLIP_POWER_TOL);
    if s > kappa {
        w.scale(kappa / s)
    } else {
        w.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub w: Tensor,
    pub omega: Tensor,
    /// `1 x d_h`
    pub b: Tensor,
    pub kappa: f64,
}

impl BackboneParams {
    pub fn new(w: Tensor, omega: Tensor, b: Tensor, kappa: f64) -> Result<Self> {
        let d = w.rows();
        if w.shape() != (d, d) || omega.shape() != (d, d) || b.shape() != (1, d) {
            return Err(Error::Shape {
                op: "backbone params",
                lhs: w.shape(),
                rhs: omega.shape(),
            });
        }
        if !(0.0..1.0).contains(&kappa) {
            return Err(Error::InvalidArgument(format!("kappa must lie in [0, 1), got {kappa}")));
        }
        Ok(Self { w, omega, b, kappa })
    }

    /// Uniform `+-1/sqrt(d_h)` entries for `W` and `Omega`, `b = 0`, then a clip.
    pub fn random<R: Rng + ?Sized>(d_h: usize, kappa: f64, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (d_h as f64).sqrt();
        let w = Tensor::uniform(d_h, d_h, bound, rng);
        let omega = Tensor::uniform(d_h, d_h, bound, rng);
        let mut p = Self::new(w, omega, Tensor::zeros(1, d_h), kappa)?;
        p.clip();
        Ok(p)
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn clip(&mut self) {
        self.w = clip_spectral(&self.w, self.kappa);
    }

    /// `tanh(A Z W^T + H Omega^T + 1 b^T)`
    pub fn apply(&self, propagation: &dyn LeftLinear, h: &Tensor, z: &Tensor) -> Result<Tensor> {
        let az = propagation.apply(z)?;
        let pre = az.matmul_t(&self.w)?.add(&h.matmul_t(&self.omega)?)?.add_row(&self.b)?;
        Ok(pre.map(f64::tanh))
    }
}

/// Tape handles of an operator's parameters.
#[derive(Clone, Copy, Debug)]
pub struct OperatorVars {
    pub w: Var,
    pub omega: Var,
    pub b: Var,
    pub quantum: Option<QuantumVars>,
}

/// Everything the operator needs about the graph(s) besides `Z`.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub propagation: Arc<BlockDiagonal>,
    /// Encoded node features `H`, `N x d_h`.
    pub h: Tensor,
    /// Topology descriptors, `N x d_tau`.
    pub tau: Tensor,
}

/// Shape and hyperparameters for [`InjectedOperator::random`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatorConfig {
    pub pathway: Pathway,
    pub hidden_dim: usize,
    /// Width of the topology descriptors (ID input only).
    pub tau_dim: usize,
    pub n_qubits: usize,
    pub repetitions: usize,
    pub encoding: Encoding,
    pub alpha: f64,
    pub kappa: f64,
}

impl OperatorConfig {
    pub fn new(pathway: Pathway, hidden_dim: usize, tau_dim: usize) -> Self {
        Self {
            pathway,
            hidden_dim,
            tau_dim,
            n_qubits: 4,
            repetitions: 1,
            encoding: Encoding::Once,
            alpha: 0.1,
            kappa: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InjectedOperator {
    pub pathway: Pathway,
    pub backbone: BackboneParams,
    pub quantum: Option<QuantumModule>,
    pub alpha: f64,
}

/// Iterate-independent part of one solve: `H Omega^T + 1 b^T`, plus `Q_ID`
/// for the ID pathway.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub propagation: Arc<BlockDiagonal>,
    pub injection: Tensor,
}

impl InjectedOperator {
    pub fn new(
        pathway: Pathway,
        backbone: BackboneParams,
        quantum: Option<QuantumModule>,
        alpha: f64,
    ) -> Result<Self> {
        let d = backbone.hidden_dim();
        match (&quantum, pathway) {
            (None, Pathway::Classical) => {}
            (Some(_), Pathway::Classical) => {
                return Err(Error::InvalidArgument("classical operator takes no quantum module".into()))
            }
            (None, _) => {
                return Err(Error::InvalidArgument(format!("pathway {pathway} needs a quantum module")))
            }
            (Some(q), _) => {
                if q.d_out() != d || (pathway != Pathway::Id && q.d_in() != d) || q.d_in() < d {
                    return Err(Error::Shape {
                        op: "quantum module dims",
                        lhs: (q.d_in(), q.d_out()),
                        rhs: (d, d),
                    });
                }
            }
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(Self {
            pathway,
            backbone,
            quantum,
            alpha,
        })
    }

    /// Random operator with the default initializations.
    pub fn random<R: Rng + ?Sized>(cfg: &OperatorConfig, rng: &mut R) -> Result<Self> {
        let d_h = cfg.hidden_dim;
        let backbone = BackboneParams::random(d_h, cfg.kappa, rng)?;
        let module = |d_in: usize, normalize: bool, rng: &mut R| {
            QuantumModule::random(d_in, d_h, cfg.n_qubits, cfg.repetitions, cfg.encoding, normalize, rng)
        };
        let quantum = match cfg.pathway {
            Pathway::Classical => None,
            Pathway::Id => Some(module(d_h + cfg.tau_dim, false, rng)),
            Pathway::Sd | Pathway::Bd => Some(module(d_h, true, rng)),
        };
        Self::new(cfg.pathway, backbone, quantum, cfg.alpha)
    }

    pub fn hidden_dim(&self) -> usize {
        self.backbone.hidden_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> OperatorVars {
        OperatorVars {
            w: tape.leaf(self.backbone.w.clone()),
            omega: tape.leaf(self.backbone.omega.clone()),
            b: tape.leaf(self.backbone.b.clone()),
            quantum: self.quantum.as_ref().map(|q| q.bind(tape)),
        }
    }

    pub fn bind_constants(&self, tape: &mut Tape) -> OperatorVars {
        OperatorVars {
            w: tape.constant(self.backbone.w.clone()),
            omega: tape.constant(self.backbone.omega.clone()),
            b: tape.constant(self.backbone.b.clone()),
            quantum: self.quantum.as_ref().map(|q| q.bind_constants(tape)),
        }
    }

    /// Iterate-independent injection on the tape. For ID this evaluates the
    /// quantum module once on `[H, tau]`.
    pub fn injection_on_tape(&self, tape: &mut Tape, vars: &OperatorVars, h: Var, tau: Var) -> Result<Var> {
        let hw = tape.matmul_t(h, vars.omega)?;
        let mut c = tape.add_row(hw, vars.b)?;
        if self.pathway == Pathway::Id {
            let (q, qv) = self.quantum_pair(vars)?;
            let input = tape.concat_cols(&[h, tau])?;
            let q_id = q.apply(tape, &qv, input)?;
            c = tape.add(c, q_id)?;
        }
        Ok(c)
    }

    /// `Phi(Z)` on the tape, given the injection from [`Self::injection_on_tape`].
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape,
        vars: &OperatorVars,
        propagation: Arc<BlockDiagonal>,
        injection: Var,
        z: Var,
    ) -> Result<Var> {
        let az = tape.left_mul(propagation, z)?;
        let azw = tape.matmul_t(az, vars.w)?;
        let pre = tape.add(azw, injection)?;
        let h = tape.tanh(pre)?;
        match self.pathway {
            Pathway::Classical | Pathway::Id => Ok(h),
            Pathway::Sd | Pathway::Bd => {
                let (q, qv) = self.quantum_pair(vars)?;
                let src = if self.pathway == Pathway::Sd { z } else { h };
                let out = q.apply(tape, &qv, src)?;
                let scaled = tape.scale(out, self.alpha)?;
                tape.add(h, scaled)
            }
        }
    }

    fn quantum_pair(&self, vars: &OperatorVars) -> Result<(&QuantumModule, QuantumVars)> {
        match (&self.quantum, vars.quantum) {
            (Some(q), Some(v)) => Ok((q, v)),
            _ => Err(Error::InvalidArgument(format!(
                "pathway {} has no quantum module",
                self.pathway
            ))),
        }
    }

    /// Computes the per-solve injection once.
    pub fn prepare(&self, ctx: &GraphContext) -> Result<Prepared> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let h = tape.constant(ctx.h.clone());
        let tau = tape.constant(ctx.tau.clone());
        let c = self.injection_on_tape(&mut tape, &vars, h, tau)?;
        Ok(Prepared {
            propagation: ctx.propagation.clone(),
            injection: tape.value(c).clone(),
        })
    }

    /// `Phi(Z)` with the injection held fixed.
    pub fn apply_prepared(&self, prepared: &Prepared, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let c = tape.constant(prepared.injection.clone());
        let zv = tape.constant(z.clone());
        let out = self.apply_on_tape(&mut tape, &vars, prepared.propagation.clone(), c, zv)?;
        Ok(tape.value(out).clone())
    }

    pub fn apply(&self, ctx: &GraphContext, z: &Tensor) -> Result<Tensor> {
        self.apply_prepared(&self.prepare(ctx)?, z)
    }

    /// `J^T g` of `Z -> Phi(Z)` at `z` with the injection fixed.
    pub fn vjp_z(&self, prepared: &Prepared, z: &Tensor, g: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let c = tape.constant(prepared.injection.clone());
        let zv = tape.leaf(z.clone());
        let out = self.apply_on_tape(&mut tape, &vars, prepared.propagation.clone(), c, zv)?;
        Ok(tape.vjp(out, g.clone(), &[zv])?.wrt(zv))
    }

    /// Spectral clip of `W`, to be called after every optimizer step.
    pub fn clip(&mut self) {
        self.backbone.clip();
    }
}
