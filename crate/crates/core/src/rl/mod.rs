//! Off-policy learner and replay storage shared by every stage.

mod buffer;
mod sac;

pub use buffer::{ReplayBuffer, SegmentRef, Transition};
pub use sac::{LatentPolicy, LossReport, SacConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Categorical prior `p(z)` over skills.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillPrior {
    probs: Vec<f64>,
}

impl SkillPrior {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("skill prior needs at least one skill"));
        }
        Ok(Self { probs: vec![1.0 / n as f64; n] })
    }

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::input("skill prior needs finite non-negative probabilities"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!("skill prior sums to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, z: usize) -> f64 {
        self.probs[z]
    }

    pub fn log_prob(&self, z: usize) -> f64 {
        self.probs[z].ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (z, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return z;
            }
        }
        self.probs.len() - 1
    }
}

/// One-hot encoding of a skill index.
pub fn one_hot(z: usize, n: usize) -> Result<Vec<f64>> {
    if z >= n {
        return Err(Error::input(format!("skill {z} out of range for {n} skills")));
    }
    let mut v = vec![0.0; n];
    v[z] = 1.0;
    Ok(v)
}
