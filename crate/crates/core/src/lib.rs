//! Attention-fusion kernels for two-stream (appearance + motion) feature
//! fusion: a vanilla Transformer block, a context-sharing block with one
//! query-independent attention map, and a gathering-scattering block that
//! routes tokens by a foreground heatmap and attends to soft-merged keys.
//!
//! Everything runs in `f64` on a small dense-array engine ([`numerics`]) with
//! hand-written backward passes, an analytic FLOP model ([`cost`]) that is
//! cross-checked against instrumented execution, and independent oracles
//! ([`verify`]).

pub mod bench;
pub mod blocks;
pub mod cost;
pub mod numerics;
pub mod pipeline;
pub mod verify;
