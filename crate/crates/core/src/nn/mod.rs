//! Differentiable compute for the gain network.
//!
//! Only what the filter graph needs: affine layers, a GRU cell, a handful of
//! elementwise and reduction primitives, and reverse-mode accumulation over a
//! [`Tape`] that may span a whole unrolled trajectory.

mod checkpoint;
mod layers;
mod optim;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, parse_checkpoint, render_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use layers::{fc_forward, gru_forward, GruVars};
pub use optim::{optimizer_step, OptimizerState};
pub use params::{Block, Dims, GainNetworkParams, Param};
pub use tape::{Fault, MatId, Tape, Var};
