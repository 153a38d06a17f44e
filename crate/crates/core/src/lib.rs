//! Signature-feature text recognition at desk scale.
//!
//! The crate turns pen-tip trajectories into truncated path-signature
//! feature maps, runs them through a from-scratch multi-branch
//! convolutional-recurrent recognizer trained with CTC, and rescoring
//! through either a learned sequence model or a smoothed character
//! trigram. Every numerical component ships with an independent oracle
//! (brute-force enumeration, quadrature, or finite differences) in its
//! test suite.
//!
//! Module map:
//!
//! * [`sig`] — exact truncated signature algebra for polylines.
//! * [`traj`] — trajectories, sliding-window features, rasterization.
//! * [`rfgeom`] — receptive-field size/center arithmetic.
//! * [`ctc`] — transcription probability, gradient, decoders.
//! * [`ngram`] — Witten-Bell smoothed character trigram model.
//! * [`net`] — differentiable layers, recognizer/sequence-model graphs.
//! * [`pipeline`] — synthetic data, training regimes, evaluation.
//! * [`config`] — plain key-value run configuration.

pub mod config;
pub mod ctc;
pub mod net;
pub mod ngram;
pub mod pipeline;
pub mod rfgeom;
pub mod sig;
pub mod traj;

pub use config::Config;
