//! Flow-matching sampling with per-trajectory kinetic path energy (KPE)
//! diagnostics.
//!
//! The crate is `no_std` with `alloc`. Everything here is a pure function of
//! its inputs and seeds; file formats, the experiment pipeline and the CLI
//! live in the companion `kinflow` crate.
//!
//! Module map:
//!
//! - [`synthdata`]: the three density-stratified 2D datasets and a Gaussian KDE.
//! - [`mlp`]: a small MLP velocity field trained with the conditional
//!   flow-matching objective, hand-written backprop and AdamW.
//! - [`efm`]: the closed-form empirical flow-matching field and the Gaussian
//!   mixture it induces (density, score, responsibilities).
//! - [`sampler`]: fixed-step ODE integration with KPE accounting and the
//!   kinetic trajectory shaping (KTS) gain.
//! - [`theory`]: numerical checks of the energy/density bounds, terminal
//!   blow-up and the universal terminal-cost lower bound.
//! - [`diagnostics`]: density estimates, rank statistics, memorization
//!   fraction and exact small-sample W2.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diagnostics;
pub mod efm;
pub mod error;
pub mod field;
pub mod math;
pub mod mlp;
pub mod rng;
pub mod sampler;
pub mod synthdata;
pub mod theory;

pub use error::{Error, Result};
pub use field::VelocityField;
