//! Audio-visual speaker diarization on synthetic scenes, end to end.
//!
//! The crate covers the whole desk-scale loop:
//!
//! * [`numerics`]: dense tensors, a reverse-mode tape, Adam, seeded init,
//!   parameter sets with binary checkpoints, and a finite-difference checker.
//! * [`frontend`]: WAV reading, FBANK extraction, audio/video alignment.
//! * [`synth`]: synthetic multi-speaker scenes (dialog structure, feature-domain
//!   audio rendering, parametric lip patches, controlled degradation).
//! * [`encoders`], [`fusion`], [`exchange`]: the model itself; per-speaker
//!   audio/visual encoders, sync-confidence-weighted cross-attention fusion
//!   (plus concat / factorized / cross-attention baselines), and the
//!   cross-speaker exchange stack with a shared activity head.
//! * [`training`]: contrastive and BCE losses, pair sampling, and the
//!   three-stage schedule.
//! * [`pipeline`]: enrollment, chunked inference, binarization and segment
//!   post-processing, RTTM I/O.
//! * [`scoring`]: an interval-exact DER engine with optimal speaker mapping,
//!   a brute-force frame-level oracle, and threshold tuning.
//!
//! The numeric substrate is generic over the scalar type through
//! [`numerics::scalar::Scalar`]; the rest of the crate, and every file format,
//! works in `f64` through the aliases below.

pub mod encoders;
pub mod exchange;
pub mod frontend;
pub mod fusion;
pub mod numerics;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod training;

pub use encoders::ModelConfig;

/// Dense row-major tensor over `f64`, the working precision of the pipeline.
pub type Tensor = numerics::tensor::Tensor<f64>;
/// Reverse-mode tape over `f64`.
pub type Graph = numerics::graph::Graph<f64>;
/// Named trainable parameters over `f64`.
pub type ParamSet = numerics::params::ParamSet<f64>;
/// Node handle into a [`Graph`].
pub type NodeId = numerics::graph::NodeId;
