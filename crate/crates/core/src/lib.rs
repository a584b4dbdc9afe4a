//! Preference-controlled skill discovery.
//!
//! A reward model learned from pairwise trajectory preferences marks out a
//! preferred region of the state space; a vector-quantized discriminator
//! trained on that region defines skills, and latent-conditioned policies are
//! trained to realize them.

pub mod envs;
pub mod error;
pub mod explorer;
pub mod nn;
pub mod preference;
pub mod region;
pub mod vqvae;
pub mod rl;
pub mod skills;

pub use error::{Error, Result};
