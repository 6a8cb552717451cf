//! State-vector simulation of the node-level quantum map.

mod circuit;
mod module;
mod state;

pub use circuit::{
    angle_encode, apply_deep_xyz, pauli_z_expectations, AngleSource, Circuit, DeepXyzParams, Encoding, Gate, GateKind,
};
pub use module::{
    parameter_shift_grad, spectrally_normalized, QuantumModule, QuantumVars, SpectralState, SPECTRAL_EPS, SPECTRAL_WARMUP,
};
pub use state::{Axis, StateVector};
