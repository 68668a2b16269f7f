//! Prototypical graph ODEs for interacting dynamical systems.
//!
//! The crate is organised bottom-up:
//!
//! * [`simkit`] generates Springs / Charged trajectories with in- and
//!   out-of-distribution parameter splits.
//! * [`diffcore`] is a small reverse-mode autodiff engine over dense `f64`
//!   tensors.
//! * [`encoder`] builds the temporal observation graph and produces object
//!   and system contexts.
//! * [`odecore`] holds the prototype bank, the context-gated mixture vector
//!   field and a differentiable fixed-step RK4 integrator.
//! * [`objectives`] contains the decoder, ELBO terms and mutual-information
//!   critics.
//! * [`trainer`] runs the alternating critic-ascent / model-descent loop.
//! * [`evalkit`] has metrics, ablations, the robustness and well-posedness
//!   harnesses, and plotting.
//! * [`cli`] wires everything into the `pgode` command.

pub mod cli;
pub mod diffcore;
pub mod encoder;
mod error;
pub mod evalkit;
pub mod nn;
pub mod objectives;
pub mod odecore;
pub mod simkit;
pub mod trainer;

pub use error::{Error, Result};
