use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvState;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, InputScaler, Mlp};

/// Log-probabilities below this are clamped.
pub const LOG_FLOOR: f64 = -20.0;

/// Skill classifier `q(z | s)` used by the state-marginal-matching baseline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineDiscriminator {
    net: Mlp,
    opt: Adam,
    scaler: InputScaler,
    num_skills: usize,
}

impl BaselineDiscriminator {
    pub fn new(scaler: InputScaler, num_skills: usize, hidden: &[usize], lr: f64, seed: u64) -> Result<Self> {
        if num_skills == 0 {
            return Err(Error::config("discriminator needs at least one skill"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![scaler.dim()];
        sizes.extend(hidden);
        sizes.push(num_skills);
        let net = Mlp::new(&sizes, Activation::Relu, Activation::Identity, &mut rng);
        Ok(Self { net, opt: Adam::new(lr), scaler, num_skills })
    }

    pub fn num_skills(&self) -> usize {
        self.num_skills
    }

    fn inputs(&self, states: &[EnvState]) -> Array2<f64> {
        Array2::from_shape_fn((states.len(), self.scaler.dim()), |(i, j)| {
            (states[i].0[j] - self.scaler.center[j]) / self.scaler.half_range[j]
        })
    }

    /// Row-wise log-softmax of the logits.
    fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
        let mut out = logits.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        out
    }

    pub fn probs(&self, state: &EnvState) -> Vec<f64> {
        let lp = Self::log_softmax(&self.net.forward(&self.inputs(std::slice::from_ref(state)).view()));
        lp.row(0).iter().map(|v| v.exp()).collect()
    }

    /// `max(log q(z | s), LOG_FLOOR)` for each `(state, skill)`.
    pub fn log_probs(&self, states: &[EnvState], skills: &[usize]) -> Result<Vec<f64>> {
        if let Some(&z) = skills.iter().find(|&&z| z >= self.num_skills) {
            return Err(Error::input(format!("skill {z} out of range for {} skills", self.num_skills)));
        }
        let lp = Self::log_softmax(&self.net.forward(&self.inputs(states).view()));
        Ok(skills.iter().enumerate().map(|(i, &z)| lp[[i, z]].max(LOG_FLOOR)).collect())
    }

    /// Makes every logit equal, so `q(z | s)` is uniform.
    #[cfg(test)]
    pub(crate) fn zero_output_layer(&mut self) {
        let last = self.net.layers_mut().last_mut().expect("at least one layer");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    /// One cross-entropy step; returns the loss before the step.
    pub fn train_step(&mut self, states: &[EnvState], skills: &[usize]) -> Result<f64> {
        if states.is_empty() || states.len() != skills.len() {
            return Err(Error::input("discriminator batch must be nonempty with one skill per state"));
        }
        let n = states.len() as f64;
        let cache = self.net.forward_cached(&self.inputs(states).view());
        let lp = Self::log_softmax(cache.output());
        let mut grad = lp.mapv(f64::exp);
        let mut loss = 0.0;
        for (i, &z) in skills.iter().enumerate() {
            if z >= self.num_skills {
                return Err(Error::input(format!("skill {z} out of range")));
            }
            loss -= lp[[i, z]] / n;
            grad[[i, z]] -= 1.0;
        }
        grad.mapv_inplace(|g| g / n);
        let (grads, _) = self.net.backward(&cache, grad);
        self.opt.step(self.net.param_slices_mut(), grads.slices());
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_sum_to_one() {
        let d = BaselineDiscriminator::new(InputScaler::identity(2), 10, &[32], 1e-3, 0).unwrap();
        for s in [EnvState::new(0.0, 0.0), EnvState::new(0.9, -0.3)] {
            let p = d.probs(&s);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn learns_to_separate_two_points() {
        let mut d = BaselineDiscriminator::new(InputScaler::identity(2), 2, &[16], 1e-2, 1).unwrap();
        let states = vec![EnvState::new(-0.5, 0.0), EnvState::new(0.5, 0.0)];
        for _ in 0..300 {
            d.train_step(&states, &[0, 1]).unwrap();
        }
        let lp = d.log_probs(&states, &[0, 1]).unwrap();
        assert!(lp.iter().all(|v| *v > (0.9f64).ln()));
        assert!(matches!(d.log_probs(&states, &[0, 2]), Err(Error::Input(_))));
    }
}
