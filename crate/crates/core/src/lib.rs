//! Two-tier episodic memory for rehearsal-based continual learning.
//!
//! A small in-memory replay buffer ([`memory::EpisodicMemory`]) is backed by a
//! large, class-indexed on-disk archive ([`storage::Archive`]). During training
//! a scoring gate ([`gate`]) picks which replayed samples to swap out, and a
//! background swap worker ([`swap::SwapWorker`]) pulls same-class replacements
//! from the archive, either serialized with training or pipelined behind it.
//!
//! The [`learner`] and [`harness`] modules provide a desk-scale continual
//! learner over synthetic class-incremental streams and the experiment runner
//! used by the `tiered-replay` CLI.

pub mod gate;
pub mod harness;
pub mod learner;
pub mod memory;
pub mod sample;
pub mod scalar;
pub mod storage;
pub mod swap;

pub use gate::{GateDecision, GatePolicy, PolicyKind, ScoreInputs};
pub use learner::{Mlp, Trainer};
pub use memory::{EpisodicMemory, StreamBuffer, UpdatePolicy};
pub use sample::Sample;
pub use scalar::Scalar;
pub use storage::Archive;
pub use swap::{SwapMode, SwapStats, SwapWorker};

/// Single-precision learner.
pub type Trainer32 = Trainer<f32>;
/// Double-precision learner.
pub type Trainer64 = Trainer<f64>;
pub type Mlp32 = Mlp<f32>;
pub type Mlp64 = Mlp<f64>;
pub type ScoreInputs32 = ScoreInputs<f32>;
pub type ScoreInputs64 = ScoreInputs<f64>;
pub type GateDecision32 = GateDecision<f32>;
pub type GateDecision64 = GateDecision<f64>;
