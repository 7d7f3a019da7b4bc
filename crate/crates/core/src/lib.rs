//! Two-branch substitution models for TEE-protected inference.
//!
//! A trained victim CNN becomes an unsecured REE branch (M_R) plus a
//! confidential TEE branch (M_T). M_R's feature maps flow one way into M_T,
//! where they are added element-wise. The crate covers knowledge transfer
//! under a BN-sparsity objective, iterative two-branch channel pruning,
//! rollback finalization, a split-execution simulator with traffic
//! auditing, and the model-stealing attack evaluations.

#![allow(clippy::large_enum_variant)]

pub mod attack;
pub mod container;
pub mod data;
pub mod error;
pub mod exec;
pub mod finalize;
pub mod graph;
pub mod pipeline;
pub mod prune;
pub mod resources;
pub mod sim;
pub mod synth;
pub mod train;
pub mod twobranch;

pub use error::{Error, Result};
pub use exec::Mode;
pub use graph::{BranchGraph, LayerKind, LayerSpec};
pub use twobranch::{forward_single, forward_twobranch, init_twobranch, AlignmentMap, InitOptions, MergePoint, TwoBranchModel};
