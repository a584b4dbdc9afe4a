//! Skill learning on a discovered codebook, and deterministic evaluation.
//!
//! The reward for skill `z` at state `s` is the codebook log-likelihood of
//! `s` (or its preferred latent) under code `z`, so each skill is pulled
//! toward its centroid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvAction, EnvName, EnvState, Environment, Polyline, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::InputScaler;
use crate::preference::RewardModel;
use crate::rl::{LatentPolicy, ReplayBuffer, SacConfig, SkillPrior, Transition};
use crate::vqvae::{InputSpace, SkillCodebook};

/// `log q(input(s) | z)` under `codebook`.
pub fn skill_reward(codebook: &SkillCodebook, model: Option<&RewardModel>, state: &EnvState, skill: usize) -> Result<f64> {
    if skill >= codebook.num_codes() {
        return Err(Error::input(format!("skill {skill} out of range for {} codes", codebook.num_codes())));
    }
    codebook.log_likelihood(&codebook.input_for(state, model)?, skill)
}

/// Batched [`skill_reward`].
pub fn skill_rewards(
    codebook: &SkillCodebook,
    model: Option<&RewardModel>,
    states: &[EnvState],
    skills: &[usize],
) -> Result<Vec<f64>> {
    if states.len() != skills.len() {
        return Err(Error::input("one skill per state required"));
    }
    let inputs = codebook.inputs_for(states, model)?;
    skills
        .iter()
        .enumerate()
        .map(|(i, &z)| codebook.log_likelihood(inputs.row(i).as_slice().expect("row-major"), z))
        .collect()
}

/// Trained policy together with the codebook (and reward model, in latent
/// mode) that defined its rewards.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkillSet {
    pub policy: LatentPolicy,
    pub codebook: SkillCodebook,
    pub reward_model: Option<RewardModel>,
    pub codebook_version: u64,
    pub training_steps: usize,
}

impl SkillSet {
    pub fn num_skills(&self) -> usize {
        self.codebook.num_codes()
    }
}

/// Incremental skill training, so callers can evaluate between chunks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkillTrainer {
    env: Environment,
    codebook: SkillCodebook,
    reward_model: Option<RewardModel>,
    codebook_version: u64,
    policy: LatentPolicy,
    buffer: ReplayBuffer,
    prior: SkillPrior,
    rng: ChaCha8Rng,
    steps: usize,
    next_episode: u64,
}

impl SkillTrainer {
    pub fn new(
        codebook: SkillCodebook,
        reward_model: Option<RewardModel>,
        env: Environment,
        sac: SacConfig,
        seed: u64,
    ) -> Result<Self> {
        if !codebook.is_trained() {
            return Err(Error::state("skill learning needs a trained codebook"));
        }
        if codebook.input_space() == InputSpace::PreferredLatent && reward_model.is_none() {
            return Err(Error::config("latent codebook needs its reward model"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = env.state_box();
        let scaler = InputScaler::from_bounds(&bounds.low, &bounds.high);
        let policy = LatentPolicy::new(scaler, env.action_dim(), codebook.num_codes(), sac, rng.random())?;
        Ok(Self {
            prior: SkillPrior::uniform(codebook.num_codes())?,
            codebook_version: codebook.version(),
            buffer: ReplayBuffer::new(1_000_000)?,
            env,
            codebook,
            reward_model,
            policy,
            rng,
            steps: 0,
            next_episode: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Collects whole episodes until at least `steps` more environment steps
    /// have been taken, updating the policy along the way.
    pub fn train(&mut self, steps: usize) -> Result<()> {
        let target = self.steps + steps;
        let sac = self.policy.config().clone();
        while self.steps < target {
            let skill = self.prior.sample(&mut self.rng);
            let episode = self.next_episode;
            self.next_episode += 1;
            let mut state = self.env.reset();
            for _ in 0..self.env.horizon() {
                let action = if self.steps < sac.learning_starts {
                    EnvAction((0..self.env.action_dim()).map(|_| self.rng.random_range(-1.0..=1.0)).collect())
                } else {
                    self.policy.select_action(&state, skill, false, &mut self.rng)?
                };
                let next = self.env.step(&state, &action)?;
                self.buffer.push(Transition { state, action: action.0, next_state: next, skill, done: false, episode })?;
                self.steps += 1;
                state = next;
                if self.steps >= sac.learning_starts {
                    for _ in 0..sac.updates_per_step {
                        self.update(sac.batch_size)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn update(&mut self, batch_size: usize) -> Result<()> {
        let batch = self.buffer.sample(batch_size, &mut self.rng)?;
        let states: Vec<EnvState> = batch.iter().map(|t| t.next_state).collect();
        let skills: Vec<usize> = batch.iter().map(|t| t.skill).collect();
        let rewards = skill_rewards(&self.codebook, self.reward_model.as_ref(), &states, &skills)?;
        let labelled: Vec<(&Transition, f64)> = batch.into_iter().zip(rewards).collect();
        self.policy.update(&labelled)?;
        Ok(())
    }

    /// Current policy packaged for evaluation.
    pub fn snapshot(&self) -> SkillSet {
        SkillSet {
            policy: self.policy.clone(),
            codebook: self.codebook.clone(),
            reward_model: self.reward_model.clone(),
            codebook_version: self.codebook_version,
            training_steps: self.steps,
        }
    }

    pub fn finish(self) -> SkillSet {
        SkillSet {
            policy: self.policy,
            codebook: self.codebook,
            reward_model: self.reward_model,
            codebook_version: self.codebook_version,
            training_steps: self.steps,
        }
    }
}

/// Trains latent-conditioned skills for `steps` environment steps (rounded
/// up to whole episodes).
pub fn train_skills(
    codebook: SkillCodebook,
    reward_model: Option<RewardModel>,
    env: Environment,
    sac: SacConfig,
    steps: usize,
    seed: u64,
) -> Result<SkillSet> {
    let mut trainer = SkillTrainer::new(codebook, reward_model, env, sac, seed)?;
    trainer.train(steps)?;
    Ok(trainer.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillEvalRow {
    pub skill: usize,
    pub final_state: [f64; STATE_DIM],
    /// Centroid in the codebook's input space.
    pub centroid: Vec<f64>,
    /// Distance from the final-state mean to the centroid, in input space.
    pub centroid_distance: f64,
    /// Distance from the skill's target state to the goal, when the
    /// environment has one. The target is the centroid for raw-state
    /// codebooks and the final-state mean otherwise.
    pub goal_distance: Option<f64>,
    pub mean_oracle_return: f64,
    /// Mean velocity over time (line walker only).
    pub mean_velocity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillTrajectory {
    pub skill: usize,
    pub episode: usize,
    pub points: Polyline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillEvalReport {
    pub rows: Vec<SkillEvalRow>,
    pub mean_centroid_to_goal: Option<f64>,
    /// Population variance of the per-skill mean velocities.
    pub velocity_variance: Option<f64>,
    pub trajectories: Vec<SkillTrajectory>,
}

impl SkillEvalReport {
    /// Aggregates computed from `rows` alone.
    pub fn aggregates(rows: &[SkillEvalRow]) -> (Option<f64>, Option<f64>) {
        let goal: Option<Vec<f64>> = rows.iter().map(|r| r.goal_distance).collect();
        let vel: Option<Vec<f64>> = rows.iter().map(|r| r.mean_velocity).collect();
        let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let goal = goal.filter(|g| !g.is_empty()).map(|g| mean_of(&g));
        let var = vel.filter(|v| !v.is_empty()).map(|v| {
            let m = mean_of(&v);
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
        });
        (goal, var)
    }

    /// Skills whose final-state mean lies within `radius` of the centroid.
    pub fn skills_near_centroid(&self, radius: f64) -> usize {
        self.rows.iter().filter(|r| r.centroid_distance <= radius).count()
    }

    /// Skills whose mean velocity is below `threshold`.
    pub fn skills_slower_than(&self, threshold: f64) -> usize {
        self.rows.iter().filter(|r| r.mean_velocity.is_some_and(|v| v < threshold)).count()
    }

    /// Mean pairwise distance between final-state means.
    pub fn mean_pairwise_final_distance(&self) -> f64 {
        let n = self.rows.len();
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..n {
            for j in i + 1..n {
                let a = EnvState(self.rows[i].final_state);
                sum += a.distance(&EnvState(self.rows[j].final_state));
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Deterministic rollouts of every skill, `episodes` times each.
pub fn evaluate_skills(skills: &SkillSet, env: &Environment, episodes: usize) -> Result<SkillEvalReport> {
    let episodes = episodes.max(1);
    let oracle = env.oracle();
    let goal = env.goal();
    let codebook = &skills.codebook;
    let model = skills.reward_model.as_ref();
    // Unused by deterministic action selection.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(skills.num_skills());
    let mut trajectories = Vec::new();
    for z in 0..skills.num_skills() {
        let mut final_sum = [0.0; STATE_DIM];
        let mut ret_sum = 0.0;
        let mut vel_sum = 0.0;
        for ep in 0..episodes {
            let mut state = env.reset();
            let mut path = vec![state];
            for _ in 0..env.horizon() {
                let action = skills.policy.select_action(&state, z, true, &mut rng)?;
                state = env.step(&state, &action)?;
                ret_sum += oracle.evaluate(&state);
                vel_sum += state.0[1];
                path.push(state);
            }
            for (acc, v) in final_sum.iter_mut().zip(state.0) {
                *acc += v;
            }
            trajectories.push(SkillTrajectory { skill: z, episode: ep, points: env.render_trajectory(&path)? });
        }
        let final_state = final_sum.map(|v| v / episodes as f64);
        let centroid = codebook.centroid(z)?;
        let final_input = codebook.input_for(&EnvState(final_state), model)?;
        let centroid_distance =
            final_input.iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let target = match codebook.input_space() {
            InputSpace::RawState => EnvState::new(centroid[0], centroid[1]),
            InputSpace::PreferredLatent => EnvState(final_state),
        };
        rows.push(SkillEvalRow {
            skill: z,
            final_state,
            centroid,
            centroid_distance,
            goal_distance: goal.map(|g| target.distance(&g)),
            mean_oracle_return: ret_sum / episodes as f64,
            mean_velocity: match env.name() {
                EnvName::LineWalker => Some(vel_sum / (episodes * env.horizon()) as f64),
                EnvName::RoomNav2d => None,
            },
        });
    }
    let (mean_centroid_to_goal, velocity_variance) = SkillEvalReport::aggregates(&rows);
    Ok(SkillEvalReport { rows, mean_centroid_to_goal, velocity_variance, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvConfig;
    use crate::vqvae::VqConfig;
    use ndarray::Array2;

    fn trained_codebook(seed: u64) -> SkillCodebook {
        let mut cb = SkillCodebook::new(
            VqConfig { num_codes: 4, ..VqConfig::default() },
            InputSpace::RawState,
            InputScaler::from_bounds(&[-1.0, -1.0], &[1.0, 1.0]),
            seed,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = Array2::from_shape_fn((200, 2), |_| rng.random_range(-1.0..1.0));
        cb.fit(&pts, 20, &mut rng).unwrap();
        cb
    }

    #[test]
    fn reward_delegates_to_the_codebook() {
        let cb = trained_codebook(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = EnvState::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let z = rng.random_range(0..4);
            assert_eq!(skill_reward(&cb, None, &s, z).unwrap(), cb.log_likelihood(&s.0, z).unwrap());
        }
        assert!(matches!(skill_reward(&cb, None, &EnvState::ORIGIN, 4), Err(Error::Input(_))));
    }

    #[test]
    fn untrained_codebook_is_rejected() {
        let cb = SkillCodebook::new(VqConfig::default(), InputSpace::RawState, InputScaler::identity(2), 0).unwrap();
        let env = Environment::new(EnvConfig::room_nav_2d()).unwrap();
        assert!(matches!(
            train_skills(cb, None, env, SacConfig::default(), 0, 0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_steps_still_evaluates() {
        let env = Environment::new(EnvConfig::room_nav_2d()).unwrap();
        let set = train_skills(trained_codebook(2), None, env.clone(), SacConfig::default(), 0, 0).unwrap();
        let report = evaluate_skills(&set, &env, 1).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.trajectories.len(), 4);
        assert_eq!(evaluate_skills(&set, &env, 1).unwrap(), report);
    }
}
