//! Desk-scale context compression lab: an f64 transformer with a tape
//! autograd, LoRA-adapted encoding of token spans into short memory-slot
//! sequences, training objectives over mixed discrete/continuous contexts,
//! deterministic tool environments, and the evaluation stack.

pub mod agentic;
pub mod data;
pub mod env;
pub mod error;
pub mod graph;
pub mod icae;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod vocab;
