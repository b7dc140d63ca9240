//! Model-extraction experiments on tabular language models, small enough to check exactly.
//!
//! Small enumerable autoregressive victims (optionally green-list
//! watermarked) are stolen by a tabular local model trained with maximum
//! likelihood, knowledge distillation or locality reinforced distillation
//! (LoRD). Because every model here is a lookup table over a tiny vocabulary,
//! the theoretical properties of the three objectives can be checked exactly
//! against brute-force oracles.
//!
//! Module map:
//!
//! - [`lm`]: the tabular autoregressive model, sampling, enumeration and
//!   distribution statistics.
//! - [`victim`]: synthetic task victims, green-list watermarking and the
//!   black/grey-box query surfaces (in-process, socket, HTTP adapter).
//! - [`extraction`]: MLE, KD and LoRD losses with closed-form gradients and
//!   their training loops.
//! - [`metrics`]: BLEU, Rouge-L, token F1, fidelity and watermark detection.
//! - [`oracle`]: the analytic RLHF optimum, finite-difference gradient checks
//!   and exhaustive agreement reports.
//! - [`harness`]: experiment configuration, persistence and sweeps.

pub mod extraction;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod oracle;
pub mod victim;

pub mod seeding;

pub use lm::{ContextKey, Gradient, NextTokenDist, SamplerConfig, TabularLM, Token, Vocab};
