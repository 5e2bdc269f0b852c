//! Compliant peg-in-hole insertion with a learned force planner and gain tuner.
//!
//! The crate is `no_std` (it needs `alloc`) and carries everything that is pure
//! computation:
//!
//! - [`dynamics`]: diagonal admittance law with overdamped damping and a
//!   semi-implicit Euler integrator.
//! - [`envsim`]: planar rectangular peg-in-hole world with penalty contact,
//!   regularized Coulomb friction and shiftable environment properties.
//! - [`datagen`]: scripted stochastic collection policy, force augmentation,
//!   returns-to-go and the gain-tuner / force-planner history windows.
//! - [`nn`] and [`seqmodel`]: from-scratch sequence regressors with hand-written
//!   reverse-mode gradients and Adam training.
//! - [`transfer`]: deployment rollouts, baselines, evaluation under environment
//!   shift, the desired-force scaling ablation and planner fine-tuning.
//!
//! File formats, the command line and everything else that touches the host
//! live in the companion `forcegain` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod datagen;
pub mod dynamics;
pub mod envsim;
mod error;
pub(crate) mod math;
pub mod nn;
pub mod seqmodel;
pub mod transfer;

pub use error::{Error, Result};

/// Seedable generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate's RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
