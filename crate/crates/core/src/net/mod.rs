//! From-scratch differentiable layers and the two model graphs built
//! from them: the multi-branch convolutional-recurrent recognizer and
//! the sequence rescoring model (embedding + recurrent stack).
//!
//! Everything computes in f64 with explicit forward caches and
//! hand-written backward passes; there is no autograd. Parameters are
//! exposed as ordered flat slices so the optimizer, checkpointing, and
//! gradient reduction stay agnostic of layer shapes. Gradients for a
//! model are held in a second instance of the same structure created
//! with `zeros_like`.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rnn;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{load_lm, load_recognizer, save_lm, save_recognizer};
pub use layers::{collapse_vertical, Conv2d, Linear, MaxPool2d};
pub use model::{LmModel, LmSpec, Recognizer, RecognizerSpec, TrunkItem};
pub use optim::{clip_global_norm, global_norm, AdaDeltaParams, Optimizer};
pub use rnn::{Blstm, Lstm, ResidualBlstm, ResidualLstm, SeqLayer};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("vertical collapse needs height 1, got {height} after stack `{stack}`")]
    NotCollapsed { height: usize, stack: String },
    #[error("trunk `{stack}` cannot reduce height {height} to 1 with 2x1 pools")]
    CannotCollapse { height: usize, stack: String },
    #[error("branch kernels must be odd for center alignment: {0:?}")]
    MisalignedBranches(String),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("model spec invalid: {0}")]
    BadSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered access to every parameter of a layer or model as flat f64
/// slices. The order is stable and identical between a model and its
/// `zeros_like` gradient twin.
pub trait ParamSlices {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;
    /// Stable names matching the slice order, for checkpoints.
    fn param_names(&self, prefix: &str) -> Vec<String>;
}

/// Total number of scalar parameters.
pub fn param_count(p: &impl ParamSlices) -> usize {
    p.param_slices().iter().map(|s| s.len()).sum()
}

/// Adds `src` into `dst` slice-wise; shapes must match.
pub fn accumulate(dst: &mut impl ParamSlices, src: &impl ParamSlices) {
    let mut d = dst.param_slices_mut();
    let s = src.param_slices();
    assert_eq!(d.len(), s.len(), "parameter structure mismatch");
    for (a, b) in d.iter_mut().zip(s) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter_mut().zip(b.iter()) {
            *x += y;
        }
    }
}

/// Scales every parameter slice in place.
pub fn scale(p: &mut impl ParamSlices, factor: f64) {
    for slice in p.param_slices_mut() {
        for v in slice {
            *v *= factor;
        }
    }
}

/// Adds `factor * other` into `dst` (used for the L2 penalty term).
pub fn add_scaled(dst: &mut impl ParamSlices, other: &impl ParamSlices, factor: f64) {
    let mut d = dst.param_slices_mut();
    let s = other.param_slices();
    for (a, b) in d.iter_mut().zip(s) {
        for (x, y) in a.iter_mut().zip(b.iter()) {
            *x += factor * y;
        }
    }
}

/// Squared L2 norm over all parameters.
pub fn squared_norm(p: &impl ParamSlices) -> f64 {
    p.param_slices()
        .iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Uniform Glorot init: ±sqrt(6 / (fan_in + fan_out)) with fan_in =
/// columns, fan_out = rows.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut w = Array2::zeros((rows, cols));
    for v in w.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    w
}

pub fn zeros_vec(n: usize) -> Array1<f64> {
    Array1::zeros(n)
}

/// Debug-build guard against non-finite values leaking out of an op.
#[inline]
pub fn debug_check_finite(tag: &str, values: &[f64]) {
    debug_assert!(
        values.iter().all(|v| v.is_finite()),
        "non-finite value after {tag}"
    );
}
