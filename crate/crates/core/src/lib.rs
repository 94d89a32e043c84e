//! Noise-resilient symbolic regression.
//!
//! A hard-concrete gated regression network first decides which input
//! columns matter. The surviving variables then feed a recurrent policy that
//! samples prefix-order expressions under a structural action mask and is
//! trained with a clipped surrogate objective on the best fraction of each
//! batch, plus per-step and whole-sequence entropy bonuses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod constraints;
pub mod dataset;
pub mod expr;
pub mod gating;
pub mod numerics;
pub mod policy;
pub mod rl;
