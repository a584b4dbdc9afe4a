//! Soft actor-critic for skill-conditioned continuous control.
//!
//! The actor and both critics see `normalized state ⊕ one_hot(skill)`; the
//! critics additionally see the action. Actions are tanh-squashed Gaussians,
//! the temperature is tuned toward a target entropy of `-action_dim`.

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::buffer::Transition;
use crate::envs::{EnvAction, EnvState};
use crate::error::{Error, Result};
use crate::nn::{softplus, Activation, Adam, InputScaler, Mlp};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub initial_alpha: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Environment steps collected before the first gradient update.
    pub learning_starts: usize,
    /// Gradient updates per environment step.
    pub updates_per_step: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            initial_alpha: 1.0,
            log_std_min: -5.0,
            log_std_max: 2.0,
            learning_starts: 1000,
            updates_per_step: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature_loss: f64,
    pub alpha: f64,
}

/// Latent-conditioned stochastic policy `π(a | s, z)` with its critics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentPolicy {
    config: SacConfig,
    scaler: InputScaler,
    action_dim: usize,
    num_skills: usize,
    actor: Mlp,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    log_alpha: f64,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    alpha_opt: Adam,
    rng: ChaCha8Rng,
    updates: u64,
}

struct ActorSample {
    /// Pre-squash sample `u = mean + std * eps`.
    eps: Array2<f64>,
    std: Array2<f64>,
    raw_log_std: Array2<f64>,
    action: Array2<f64>,
    log_prob: Vec<f64>,
}

impl LatentPolicy {
    pub fn new(
        scaler: InputScaler,
        action_dim: usize,
        num_skills: usize,
        config: SacConfig,
        seed: u64,
    ) -> Result<Self> {
        if num_skills == 0 || action_dim == 0 {
            return Err(Error::config("policy needs at least one skill and one action dimension"));
        }
        if config.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = scaler.dim() + num_skills;
        let layers = |input: usize, output: usize| -> Vec<usize> {
            std::iter::once(input).chain(config.hidden.iter().copied()).chain(std::iter::once(output)).collect()
        };
        let actor = Mlp::new(&layers(obs, 2 * action_dim), Activation::Relu, Activation::Identity, &mut rng);
        let q1 = Mlp::new(&layers(obs + action_dim, 1), Activation::Relu, Activation::Identity, &mut rng);
        let q2 = Mlp::new(&layers(obs + action_dim, 1), Activation::Relu, Activation::Identity, &mut rng);
        Ok(Self {
            scaler,
            action_dim,
            num_skills,
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            log_alpha: config.initial_alpha.ln(),
            actor_opt: Adam::new(config.actor_lr),
            q1_opt: Adam::new(config.critic_lr),
            q2_opt: Adam::new(config.critic_lr),
            alpha_opt: Adam::new(config.alpha_lr),
            rng,
            updates: 0,
            config,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn num_skills(&self) -> usize {
        self.num_skills
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn check_skill(&self, skill: usize) -> Result<()> {
        if skill >= self.num_skills {
            return Err(Error::input(format!("skill {skill} out of range for {} skills", self.num_skills)));
        }
        Ok(())
    }

    fn observation(&self, states: &[&EnvState], skills: &[usize]) -> Array2<f64> {
        let dim = self.scaler.dim();
        let mut obs = Array2::zeros((states.len(), dim + self.num_skills));
        for (i, (s, &z)) in states.iter().zip(skills).enumerate() {
            for j in 0..dim {
                obs[[i, j]] = (s.0[j] - self.scaler.center[j]) / self.scaler.half_range[j];
            }
            obs[[i, dim + z]] = 1.0;
        }
        obs
    }

    fn log_std(&self, raw: f64) -> f64 {
        let (lo, hi) = (self.config.log_std_min, self.config.log_std_max);
        lo + 0.5 * (hi - lo) * (raw.tanh() + 1.0)
    }

    fn sample_actions(&mut self, actor_out: &Array2<f64>) -> ActorSample {
        let n = actor_out.nrows();
        let a = self.action_dim;
        let mut eps = Array2::zeros((n, a));
        let mut std = Array2::zeros((n, a));
        let mut action = Array2::zeros((n, a));
        let raw_log_std = actor_out.slice(s![.., a..]).to_owned();
        let mut log_prob = vec![0.0; n];
        for i in 0..n {
            for j in 0..a {
                let e: f64 = self.rng.sample(StandardNormal);
                let ls = self.log_std(raw_log_std[[i, j]]);
                let sd = ls.exp();
                let u = actor_out[[i, j]] + sd * e;
                eps[[i, j]] = e;
                std[[i, j]] = sd;
                action[[i, j]] = u.tanh();
                // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
                let log_det = 2.0 * (LN_2 - u - softplus(-2.0 * u));
                log_prob[i] += -0.5 * e * e - ls - HALF_LN_2PI - log_det;
            }
        }
        ActorSample { eps, std, raw_log_std, action, log_prob }
    }

    /// Squashed mean when `deterministic`, otherwise a squashed sample drawn with `rng`.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        state: &EnvState,
        skill: usize,
        deterministic: bool,
        rng: &mut R,
    ) -> Result<EnvAction> {
        self.check_skill(skill)?;
        let obs = self.observation(&[state], &[skill]);
        let out = self.actor.forward(&obs.view());
        let a = self.action_dim;
        let action = (0..a)
            .map(|j| {
                let mean = out[[0, j]];
                if deterministic {
                    mean.tanh()
                } else {
                    let e: f64 = rng.sample(StandardNormal);
                    (mean + self.log_std(out[[0, a + j]]).exp() * e).tanh()
                }
            })
            .collect();
        Ok(EnvAction(action))
    }

    /// One gradient step on critics, actor and temperature, followed by a
    /// soft target update. `batch` pairs each transition with its reward.
    pub fn update(&mut self, batch: &[(&Transition, f64)]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::input("update needs a nonempty batch"));
        }
        for (i, (t, r)) in batch.iter().enumerate() {
            if !r.is_finite() {
                return Err(Error::input(format!("reward of batch entry {i} is not finite ({r})")));
            }
            self.check_skill(t.skill)?;
            if t.action.len() != self.action_dim {
                return Err(Error::input(format!("batch entry {i} has a {}-d action", t.action.len())));
            }
        }
        let n = batch.len();
        let nf = n as f64;
        let skills: Vec<usize> = batch.iter().map(|(t, _)| t.skill).collect();
        let states: Vec<&EnvState> = batch.iter().map(|(t, _)| &t.state).collect();
        let next_states: Vec<&EnvState> = batch.iter().map(|(t, _)| &t.next_state).collect();
        let obs = self.observation(&states, &skills);
        let next_obs = self.observation(&next_states, &skills);
        let actions = Array2::from_shape_fn((n, self.action_dim), |(i, j)| batch[i].0.action[j].clamp(-1.0, 1.0));
        let alpha = self.alpha();

        // Critic targets.
        let next_out = self.actor.forward(&next_obs.view());
        let next = self.sample_actions(&next_out);
        let next_in = concatenate![Axis(1), next_obs, next.action];
        let qt1 = self.q1_target.forward(&next_in.view());
        let qt2 = self.q2_target.forward(&next_in.view());
        let targets: Vec<f64> = (0..n)
            .map(|i| {
                let (t, r) = batch[i];
                let bootstrap = if t.done { 0.0 } else { 1.0 };
                r + self.config.gamma * bootstrap * (qt1[[i, 0]].min(qt2[[i, 0]]) - alpha * next.log_prob[i])
            })
            .collect();

        let q_in = concatenate![Axis(1), obs, actions];
        let mut critic_loss = 0.0;
        for (net, opt) in [(&mut self.q1, &mut self.q1_opt), (&mut self.q2, &mut self.q2_opt)] {
            let cache = net.forward_cached(&q_in.view());
            let pred = cache.output();
            let mut grad = Array2::zeros((n, 1));
            for i in 0..n {
                let diff = pred[[i, 0]] - targets[i];
                critic_loss += diff * diff / nf;
                grad[[i, 0]] = 2.0 * diff / nf;
            }
            let (grads, _) = net.backward(&cache, grad);
            opt.step(net.param_slices_mut(), grads.slices());
        }

        // Actor through the reparameterized, squashed sample.
        let actor_cache = self.actor.forward_cached(&obs.view());
        let cur = self.sample_actions(actor_cache.output());
        let new_in = concatenate![Axis(1), obs, cur.action];
        let c1 = self.q1.forward_cached(&new_in.view());
        let c2 = self.q2.forward_cached(&new_in.view());
        let mut pick1 = Array2::zeros((n, 1));
        let mut pick2 = Array2::zeros((n, 1));
        let mut actor_loss = 0.0;
        for i in 0..n {
            let (a, b) = (c1.output()[[i, 0]], c2.output()[[i, 0]]);
            if a <= b {
                pick1[[i, 0]] = 1.0;
            } else {
                pick2[[i, 0]] = 1.0;
            }
            actor_loss += (alpha * cur.log_prob[i] - a.min(b)) / nf;
        }
        let (_, dq1) = self.q1.backward(&c1, pick1);
        let (_, dq2) = self.q2.backward(&c2, pick2);
        let obs_dim = obs.ncols();
        let a_dim = self.action_dim;
        let (lo, hi) = (self.config.log_std_min, self.config.log_std_max);
        let mut grad_out = Array2::zeros((n, 2 * a_dim));
        for i in 0..n {
            for j in 0..a_dim {
                let act = cur.action[[i, j]];
                let dq_da = dq1[[i, obs_dim + j]] + dq2[[i, obs_dim + j]];
                let dq_du = dq_da * (1.0 - act * act);
                let se = cur.std[[i, j]] * cur.eps[[i, j]];
                let d_mean = alpha * 2.0 * act - dq_du;
                let d_log_std = alpha * (-1.0 + 2.0 * act * se) - dq_du * se;
                let t = cur.raw_log_std[[i, j]].tanh();
                grad_out[[i, j]] = d_mean / nf;
                grad_out[[i, a_dim + j]] = d_log_std * 0.5 * (hi - lo) * (1.0 - t * t) / nf;
            }
        }
        let (actor_grads, _) = self.actor.backward(&actor_cache, grad_out);
        self.actor_opt.step(self.actor.param_slices_mut(), actor_grads.slices());

        // Temperature.
        let target_entropy = -(self.action_dim as f64);
        let mean_gap = cur.log_prob.iter().map(|lp| lp + target_entropy).sum::<f64>() / nf;
        let temperature_loss = -self.log_alpha * mean_gap;
        let mut log_alpha = [self.log_alpha];
        self.alpha_opt.step(vec![&mut log_alpha[..]], vec![&[-mean_gap][..]]);
        self.log_alpha = log_alpha[0];

        self.soft_update_targets();
        self.updates += 1;
        Ok(LossReport { critic_loss, actor_loss, temperature_loss, alpha: self.alpha() })
    }

    /// Moves both target critics toward the online critics by `tau`.
    pub fn soft_update_targets(&mut self) {
        self.q1_target.soft_update_from(&self.q1, self.config.tau);
        self.q2_target.soft_update_from(&self.q2, self.config.tau);
    }

    /// Max-norm distance between target and online critic weights.
    pub fn target_gap(&self) -> f64 {
        self.q1_target.max_abs_diff(&self.q1).max(self.q2_target.max_abs_diff(&self.q2))
    }

    /// Critic value `Q1(s, z, a)`; exposed for diagnostics.
    pub fn q_value(&self, state: &EnvState, skill: usize, action: &[f64]) -> Result<f64> {
        self.check_skill(skill)?;
        let obs = self.observation(&[state], &[skill]);
        let a = Array2::from_shape_vec((1, action.len()), action.to_vec())
            .map_err(|e| Error::input(e.to_string()))?;
        let input = concatenate![Axis(1), obs, a];
        Ok(self.q1.forward(&input.view())[[0, 0]])
    }

    #[cfg(test)]
    pub(crate) fn perturb_critics(&mut self, amount: f64) {
        for net in [&mut self.q1, &mut self.q2] {
            let flat: Vec<f64> = net.to_flat().iter().map(|v| v + amount).collect();
            net.set_flat(&flat);
        }
    }

    #[cfg(test)]
    pub(crate) fn actor_grads_for_check(
        &self,
        obs_state: &EnvState,
        skill: usize,
        eps: &[f64],
    ) -> (f64, crate::nn::MlpGrads) {
        // Single-sample actor objective with fixed noise, for gradient checks.
        let obs = self.observation(&[obs_state], &[skill]);
        let cache = self.actor.forward_cached(&obs.view());
        let out = cache.output();
        let a_dim = self.action_dim;
        let alpha = self.alpha();
        let (lo, hi) = (self.config.log_std_min, self.config.log_std_max);
        let mut action = Array2::zeros((1, a_dim));
        let mut log_prob = 0.0;
        for j in 0..a_dim {
            let ls = self.log_std(out[[0, a_dim + j]]);
            let u = out[[0, j]] + ls.exp() * eps[j];
            action[[0, j]] = u.tanh();
            log_prob += -0.5 * eps[j] * eps[j] - ls - HALF_LN_2PI - 2.0 * (LN_2 - u - softplus(-2.0 * u));
        }
        let q_in = concatenate![Axis(1), obs, action];
        let c1 = self.q1.forward_cached(&q_in.view());
        let c2 = self.q2.forward_cached(&q_in.view());
        let (a, b) = (c1.output()[[0, 0]], c2.output()[[0, 0]]);
        let loss = alpha * log_prob - a.min(b);
        let pick = Array2::from_elem((1, 1), 1.0);
        let dq = if a <= b { self.q1.backward(&c1, pick).1 } else { self.q2.backward(&c2, pick).1 };
        let obs_dim = obs.ncols();
        let mut grad_out = Array2::zeros((1, 2 * a_dim));
        for j in 0..a_dim {
            let act = action[[0, j]];
            let dq_du = dq[[0, obs_dim + j]] * (1.0 - act * act);
            let sd = self.log_std(out[[0, a_dim + j]]).exp();
            let se = sd * eps[j];
            let t = out[[0, a_dim + j]].tanh();
            grad_out[[0, j]] = alpha * 2.0 * act - dq_du;
            grad_out[[0, a_dim + j]] = (alpha * (-1.0 + 2.0 * act * se) - dq_du * se) * 0.5 * (hi - lo) * (1.0 - t * t);
        }
        (loss, self.actor.backward(&cache, grad_out).0)
    }

    #[cfg(test)]
    pub(crate) fn actor_mut(&mut self) -> &mut Mlp {
        &mut self.actor
    }
}
