//! Bi-directional modality interaction prompting on a desk-scale dual encoder.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode gradient tape.
//! * [`backbone`]: the dual text/image transformer encoders and the cosine
//!   classification rule, plus contrastive pretraining.
//! * [`prompt`]: deep prompt stacks and the prompted encoder walks.
//! * [`aggregation`]: attention-gated bi-directional prompt aggregation and
//!   its ablation baselines.
//! * [`data`]: the procedural bimodal dataset generator.
//! * [`train`]: few-shot prompt tuning and the evaluation protocols.
//! * [`experiment`]: configuration, checkpoints, runs, sweeps and reports.
//! * [`verify`]: finite-difference and naive-forward verification suites.

pub mod aggregation;
pub mod backbone;
pub mod data;
pub mod experiment;
pub mod par;
pub mod prompt;
pub mod tensor;
pub mod train;
pub mod verify;

pub use tensor::{Tensor, TensorError};
