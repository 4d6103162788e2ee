//! Continual-learning byte decoder built around three cooperating parts:
//! a stack of attention-plus-expert columns, a low-rank router that
//! modulates information flow between them, and an episodic memory with
//! deferred surprise-gated writes plus replay consolidation driven by a
//! feedback controller.
//!
//! The crate is self-contained: tensors, reverse-mode gradients, the
//! optimizer, synthetic task streams, metrics, checkpoints, and an
//! executable verification battery all live here. The `cli` crate wraps
//! it in commands; `bench` holds criterion benchmarks.

pub mod column;
pub mod config;
pub mod controller;
pub mod error;
pub mod hippocampus;
pub mod param;
pub mod replay;
pub mod rng;
pub mod tensor;
pub mod thalamus;

pub use column::{causal_mask, load_balance_penalty, ColumnOut, ColumnWeights};
pub use config::{Fault, ModelConfig, RunConfig};
pub use controller::{ControllerState, ControllerTrace};
pub use error::{Error, Result};
pub use hippocampus::{EpisodicMemory, Hippocampus, HippoOut, HippoWeights, PendingWrite};
pub use replay::ReplayStores;
pub use param::Param;
pub use rng::{Rng, RngState};
pub use tensor::{finite_diff_check, quantile, topk_lastdim, Tape, Tensor};
pub use thalamus::{ThalamusOut, ThalamusWeights};
