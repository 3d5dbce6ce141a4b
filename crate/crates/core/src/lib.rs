//! Multi-vehicle trajectory forecasting for highway surveillance tracks.
//!
//! The pipeline turns an observation window of every vehicle in a scene into
//! per-vehicle token sequences (relative-motion features enriched by a
//! single-step message pass over the fully connected vehicle graph, with
//! channel and temporal attention gates on neighbor features), then decodes
//! future per-step displacements autoregressively with a causal
//! decoder-only transformer. Everything runs on a small dense-tensor f64
//! autodiff core so training, gradient checking, and inference share one
//! numeric path.
//!
//! Crate layout mirrors the pipeline:
//! - [`numkit`]: tensors, the reverse-mode tape, parameter store, Adam.
//! - [`datahub`]: track ingestion, down-sampling, scene windowing, synthetic
//!   scene generation.
//! - [`tokenizer`]: scene -> per-vehicle token sequences.
//! - [`predictor`]: causal transformer stack, teacher forcing, generation.
//! - [`metrics`]: ADE / FDE / per-horizon RMSE over an evaluation set.
//! - [`trainer`]: MSE training loop, baselines, horizon sweep.
//!
//! Scene-level fan-out (tokenization, evaluation, per-scene gradients) runs
//! on rayon when the `parallel` feature (default) is enabled and falls back
//! to plain iterators otherwise; results are bit-identical either way
//! because per-scene work is pure and reductions happen in a fixed order.

pub mod datahub;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod par;
pub mod predictor;
pub mod tokenizer;
pub mod trainer;

pub use model::{ModelConfig, VtModel};
pub use numkit::{NumError, ParamStore, Tape, Tensor, Var};
