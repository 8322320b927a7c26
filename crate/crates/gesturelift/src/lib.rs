//! Desk-scale pipeline for comparing co-speech gestures generated natively
//! in 3D against gestures generated in 2D and lifted to 3D by a
//! deterministic temporal-convolutional lifter.
//!
//! The crate provides:
//!
//! - [`skeleton`]: directional-vector pose representation and 2D projection
//! - [`synth`]: seeded synthetic gesture+speech corpora with known beat
//!   times and a controllable 2D-to-3D ambiguity structure
//! - [`nn`]: a minimal differentiable-network substrate (dense, conv1d,
//!   layer norm, activations, attention blocks) with reverse-mode
//!   gradients and Adam
//! - [`diffusion`]: a DDPM gesture generator with classifier-free guidance
//!   and condition masking
//! - [`lifter`]: a deterministic 2D-to-3D lifting network plus MPJPE
//! - [`metrics`]: Fréchet gesture distance, beat consistency, and
//!   diversity, plus the pose feature encoder behind them
//! - [`harness`]: experiment orchestration that evaluates the comparative
//!   settings end to end and writes CSV/Markdown reports
//!
//! Start with the runnable examples in `examples/` (one per capability),
//! or the `gesturelift` binary which exposes the pipeline as subcommands.

pub mod cli;
pub mod diffusion;
pub mod harness;
pub mod lifter;
pub mod metrics;
pub mod nn;
pub mod seeds;
pub mod skeleton;
pub mod synth;

pub use skeleton::{PoseSequence, RawJointSequence, SkeletonTopology};
pub use synth::{GestureDataset, SpeechTrack, SynthConfig};
