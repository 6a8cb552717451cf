//! Plain-text checkpoints. Floats are written with `{:?}`, which round-trips
//! every f64 exactly.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::quantum::SpectralState;
use crate::tensor::Tensor;

const MAGIC: &str = "qignn-checkpoint 1";

/// Hex SHA-256 of the TOML form of `config`.
pub fn config_hash(config: &ModelConfig) -> String {
    let text = toml::to_string(config).expect("model config serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub num_features: usize,
    pub num_classes: usize,
    pub params: Vec<(String, Tensor)>,
    /// `[u_in, v_in, u_out, v_out]` of the spectral-normalization state.
    pub spectral: Option<[Vec<f64>; 4]>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let spectral = model
            .op
            .quantum
            .as_ref()
            .and_then(|q| q.spectral.as_ref())
            .map(|(a, b)| [a.u.clone(), a.v.clone(), b.u.clone(), b.v.clone()]);
        Self {
            config_hash: config_hash(&model.config),
            num_features: model.num_features,
            num_classes: model.num_classes,
            params: model.params().into_iter().map(|(n, _, t)| (n, t.clone())).collect(),
            spectral,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "config_hash {}", self.config_hash);
        let _ = writeln!(s, "num_features {}", self.num_features);
        let _ = writeln!(s, "num_classes {}", self.num_classes);
        for (name, t) in &self.params {
            let _ = writeln!(s, "param {name} {} {}", t.rows(), t.cols());
            let _ = writeln!(s, "{}", join(t.data()));
        }
        if let Some(vs) = &self.spectral {
            for (name, v) in ["u_in", "v_in", "u_out", "v_out"].iter().zip(vs) {
                let _ = writeln!(s, "spectral {name} {}", v.len());
                let _ = writeln!(s, "{}", join(v));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, message: String| Error::Parse {
            file: "checkpoint".into(),
            line: line + 1,
            msg: message,
        };
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            Some((i, l)) => return Err(bad(i, format!("expected '{MAGIC}', found '{l}'"))),
            None => return Err(bad(0, "empty checkpoint".into())),
        }
        let mut header = |key: &str| -> Result<String> {
            let (i, l) = lines.next().ok_or_else(|| bad(0, format!("missing {key}")))?;
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(|r| r.trim().to_string())
                .ok_or_else(|| bad(i, format!("expected {key}")))
        };
        let config_hash = header("config_hash")?;
        let num_features = header("num_features")?
            .parse()
            .map_err(|e| bad(2, format!("num_features: {e}")))?;
        let num_classes = header("num_classes")?
            .parse()
            .map_err(|e| bad(3, format!("num_classes: {e}")))?;

        let mut params = Vec::new();
        let mut spectral: Vec<Vec<f64>> = Vec::new();
        while let Some((i, l)) = lines.next() {
            let parts: Vec<&str> = l.split_whitespace().collect();
            let (values_line, values) = match lines.next() {
                Some((j, v)) => (j, parse_floats(v).map_err(|m| bad(j, m))?),
                None => return Err(bad(i, "missing values".into())),
            };
            match parts.as_slice() {
                ["param", name, r, c] => {
                    let r: usize = r.parse().map_err(|e| bad(i, format!("rows: {e}")))?;
                    let c: usize = c.parse().map_err(|e| bad(i, format!("cols: {e}")))?;
                    let t = Tensor::from_vec(r, c, values).map_err(|e| bad(values_line, e.to_string()))?;
                    params.push((name.to_string(), t));
                }
                ["spectral", _, n] => {
                    let n: usize = n.parse().map_err(|e| bad(i, format!("length: {e}")))?;
                    if values.len() != n {
                        return Err(bad(values_line, format!("expected {n} values, found {}", values.len())));
                    }
                    spectral.push(values);
                }
                _ => return Err(bad(i, format!("unrecognized record '{l}'"))),
            }
        }
        let spectral = match spectral.len() {
            0 => None,
            4 => {
                let mut it = spectral.into_iter();
                Some([it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
            }
            n => return Err(bad(0, format!("expected 0 or 4 spectral vectors, found {n}"))),
        };
        Ok(Self {
            config_hash,
            num_features,
            num_classes,
            params,
            spectral,
        })
    }

    /// Rebuilds the model. `config` must hash to the stored value.
    pub fn restore(&self, config: &ModelConfig) -> Result<Model> {
        let hash = config_hash(config);
        if hash != self.config_hash {
            return Err(Error::Config(format!(
                "checkpoint was written for config {}, got {hash}",
                self.config_hash
            )));
        }
        let mut model = Model::new(config.clone(), self.num_features, self.num_classes, 0)?;
        let names = model.param_names();
        if names.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                names.len()
            )));
        }
        for ((name, slot), (stored, t)) in names.iter().zip(model.params_mut()).zip(&self.params) {
            if name != stored || slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {stored} {:?} does not match {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        let q_spectral = model.op.quantum.as_mut().and_then(|q| q.spectral.as_mut());
        match (q_spectral, &self.spectral) {
            (Some((a, b)), Some([ui, vi, uo, vo])) => {
                *a = SpectralState { u: ui.clone(), v: vi.clone() };
                *b = SpectralState { u: uo.clone(), v: vo.clone() };
            }
            (None, None) => {}
            _ => return Err(Error::Config("spectral state does not match the model".into())),
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn join(v: &[f64]) -> String {
    let mut s = String::with_capacity(v.len() * 20);
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:?}");
    }
    s
}

fn parse_floats(line: &str) -> std::result::Result<Vec<f64>, String> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("'{t}': {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::Pathway;

    fn small(pathway: Pathway) -> ModelConfig {
        ModelConfig {
            pathway,
            hidden_dim: 8,
            n_qubits: 2,
            heads: 2,
            mlp_hidden: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for pathway in Pathway::ALL {
            let mut m = Model::new(small(pathway), 5, 3, 11).unwrap();
            if let Some(q) = &mut m.op.quantum {
                q.spectral_step();
            }
            let ck = Checkpoint::from_model(&m);
            let back = Checkpoint::parse(&ck.to_text()).unwrap();
            assert_eq!(back, ck);
            let restored = back.restore(&m.config).unwrap();
            assert_eq!(Checkpoint::from_model(&restored), ck);
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let m = Model::new(small(Pathway::Classical), 5, 2, 0).unwrap();
        let ck = Checkpoint::from_model(&m);
        let other = ModelConfig {
            kappa: 0.5,
            ..small(Pathway::Classical)
        };
        assert!(ck.restore(&other).is_err());
        assert_ne!(config_hash(&other), ck.config_hash);
        assert_eq!(ck.config_hash.len(), 64);
    }

    #[test]
    fn malformed_text_is_rejected() {
        assert!(Checkpoint::parse("").is_err());
        assert!(Checkpoint::parse("qignn-checkpoint 2\n").is_err());
        let m = Model::new(small(Pathway::Classical), 5, 2, 0).unwrap();
        let text = Checkpoint::from_model(&m).to_text().replacen("param encoder.e 8 5", "param encoder.e 8 4", 1);
        assert!(Checkpoint::parse(&text).is_err());
    }
}
