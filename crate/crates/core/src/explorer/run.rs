use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::density::DensityModel;
use super::discriminator::BaselineDiscriminator;
use super::rewards::{guided_rewards, smm_rewards, RewardTerms, RewardWeights, SmmTarget};
use crate::envs::{EnvAction, EnvState, Environment, OracleReward};
use crate::error::{Error, Result};
use crate::nn::InputScaler;
use crate::preference::{
    oracle_label, sample_queries, Labeler, PreferenceDataset, PreferencePair, PreferenceRecord, QueryStrategy,
    RewardModel, RewardModelConfig,
};
use crate::region::{estimate_region_with_floor, RegionEstimate};
use crate::rl::{LatentPolicy, ReplayBuffer, SacConfig, SkillPrior, Transition};
use crate::vqvae::{InputSpace, SkillCodebook, VqConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationMode {
    /// Marginal matching against a uniform target.
    #[default]
    SmmBaseline,
    /// Marginal matching with the learned reward as the target.
    SmmPrior,
    /// Learned reward, novelty, and region-restricted codebook likelihood.
    CdpGuided,
}

impl ExplorationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SmmBaseline => "smm_baseline",
            Self::SmmPrior => "smm_prior",
            Self::CdpGuided => "cdp_guided",
        }
    }

    pub fn uses_preferences(&self) -> bool {
        !matches!(self, Self::SmmBaseline)
    }
}

impl std::fmt::Display for ExplorationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExplorationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smm_baseline" => Ok(Self::SmmBaseline),
            "smm_prior" => Ok(Self::SmmPrior),
            "cdp_guided" => Ok(Self::CdpGuided),
            other => Err(Error::config(format!("unknown exploration mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationConfig {
    pub mode: ExplorationMode,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub queries_per_epoch: usize,
    /// Total label budget across the stage.
    pub max_queries: usize,
    pub beta_region: f64,
    pub weights: RewardWeights,
    pub num_skills: usize,
    pub segment_len: usize,
    pub query_strategy: QueryStrategy,
    /// Reward-model minibatch updates per epoch.
    pub reward_steps: usize,
    /// Codebook minibatch updates per epoch.
    pub discovery_steps: usize,
    /// Baseline classifier minibatch updates per epoch.
    pub discriminator_steps: usize,
    pub discriminator_hidden: Vec<usize>,
    pub discriminator_lr: f64,
    /// Most recent buffered states considered for the region.
    pub candidate_pool: usize,
    /// Lower bound on region size; the threshold relaxes to reach it.
    pub min_region_members: usize,
    pub codebook_input: InputSpace,
    pub density_bins: usize,
    pub density_alpha: f64,
    pub buffer_capacity: usize,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            mode: ExplorationMode::CdpGuided,
            epochs: 40,
            episodes_per_epoch: 4,
            queries_per_epoch: 20,
            max_queries: 400,
            beta_region: 0.5,
            weights: RewardWeights::default(),
            num_skills: 10,
            segment_len: 25,
            query_strategy: QueryStrategy::Uniform,
            reward_steps: 100,
            discovery_steps: 200,
            discriminator_steps: 100,
            discriminator_hidden: vec![64, 64],
            discriminator_lr: 1e-3,
            candidate_pool: 10_000,
            min_region_members: 10,
            codebook_input: InputSpace::RawState,
            density_bins: 20,
            density_alpha: 1.0,
            buffer_capacity: 1_000_000,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_epoch == 0 || self.num_skills == 0 || self.segment_len == 0 {
            return Err(Error::config("episodes_per_epoch, num_skills and segment_len must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta_region) {
            return Err(Error::config(format!("beta_region {} outside [0, 1]", self.beta_region)));
        }
        if self.candidate_pool == 0 {
            return Err(Error::config("candidate_pool must be positive"));
        }
        Ok(())
    }
}

/// Supplies labels for query pairs at step (a).
pub trait LabelSource {
    /// One record per pair, in order. May block until labels are available.
    fn label(&mut self, epoch: usize, pairs: Vec<PreferencePair>) -> Result<Vec<PreferenceRecord>>;
}

/// Labels every pair with the environment's ground-truth oracle.
#[derive(Clone, Debug)]
pub struct OracleLabels {
    oracle: OracleReward,
    issued: u64,
}

impl OracleLabels {
    pub fn new(oracle: OracleReward) -> Self {
        Self { oracle, issued: 0 }
    }
}

impl LabelSource for OracleLabels {
    fn label(&mut self, epoch: usize, pairs: Vec<PreferencePair>) -> Result<Vec<PreferenceRecord>> {
        Ok(pairs
            .into_iter()
            .map(|pair| {
                self.issued += 1;
                let label = oracle_label(&pair, &self.oracle);
                let mut record = PreferenceRecord::new(format!("e{epoch}-q{}", self.issued), pair, label, Labeler::Oracle);
                // Wall-clock stamps would break byte-identical reruns.
                record.timestamp = 0;
                record
            })
            .collect())
    }
}

/// Per-epoch summary. Version fields witness the ordering of steps (a)-(d).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: String,
    pub mean_oracle_return: f64,
    pub mean_reward: f64,
    pub mean_preference_term: f64,
    pub mean_novelty_term: f64,
    pub mean_diversity_term: f64,
    pub region_size: usize,
    pub codebook_usage: Vec<u64>,
    pub label_count: usize,
    pub holdout_accuracy: Option<f64>,
    pub reward_model_version: u64,
    pub region_model_version: Option<u64>,
    pub codebook_version_fit: Option<u64>,
    pub codebook_version_used: Option<u64>,
    pub policy_updates: u64,
    pub transitions: usize,
}

/// Guided exploration state. Everything except the region is serializable;
/// the region is rebuilt at the start of every epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Explorer {
    config: ExplorationConfig,
    env: Environment,
    buffer: ReplayBuffer,
    policy: LatentPolicy,
    density: DensityModel,
    discriminator: BaselineDiscriminator,
    reward_model: RewardModel,
    codebook: SkillCodebook,
    #[serde(skip)]
    region: Option<RegionEstimate>,
    prior: SkillPrior,
    epoch: usize,
    env_steps: usize,
    next_episode: u64,
    queries_asked: usize,
    reward_trained: bool,
    rng: ChaCha8Rng,
}

impl Explorer {
    pub fn new(
        env: Environment,
        config: ExplorationConfig,
        sac: SacConfig,
        reward: RewardModelConfig,
        vq: VqConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = env.state_box();
        let scaler = InputScaler::from_bounds(&bounds.low, &bounds.high);
        let policy = LatentPolicy::new(scaler.clone(), env.action_dim(), config.num_skills, sac, rng.random())?;
        let density = DensityModel::new(bounds, config.density_bins, config.density_alpha)?;
        let discriminator = BaselineDiscriminator::new(
            scaler.clone(),
            config.num_skills,
            &config.discriminator_hidden,
            config.discriminator_lr,
            rng.random(),
        )?;
        let reward_model = RewardModel::new(reward, scaler.clone(), rng.random())?;
        let vq = VqConfig { num_codes: config.num_skills, ..vq };
        let codebook = match config.codebook_input {
            InputSpace::RawState => SkillCodebook::new(vq, InputSpace::RawState, scaler, rng.random())?,
            InputSpace::PreferredLatent => SkillCodebook::new(
                vq,
                InputSpace::PreferredLatent,
                InputScaler::identity(reward_model.latent_dim()),
                rng.random(),
            )?,
        };
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            prior: SkillPrior::uniform(config.num_skills)?,
            config,
            env,
            policy,
            density,
            discriminator,
            reward_model,
            codebook,
            region: None,
            epoch: 0,
            env_steps: 0,
            next_episode: 0,
            queries_asked: 0,
            reward_trained: false,
            rng,
        })
    }

    pub fn config(&self) -> &ExplorationConfig {
        &self.config
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn reward_model(&self) -> &RewardModel {
        &self.reward_model
    }

    pub fn codebook(&self) -> &SkillCodebook {
        &self.codebook
    }

    pub fn density(&self) -> &DensityModel {
        &self.density
    }

    pub fn region(&self) -> Option<&RegionEstimate> {
        self.region.as_ref()
    }

    pub fn policy(&self) -> &LatentPolicy {
        &self.policy
    }

    pub fn reward_trained(&self) -> bool {
        self.reward_trained
    }

    /// Runs steps (a)-(d) of one epoch.
    pub fn run_epoch(&mut self, dataset: &mut PreferenceDataset, labels: &mut dyn LabelSource) -> Result<EpochMetrics> {
        if self.is_done() {
            return Err(Error::state(format!("exploration already ran its {} epochs", self.config.epochs)));
        }
        let mode = self.config.mode;
        let mut metrics = EpochMetrics { epoch: self.epoch, mode: mode.to_string(), ..Default::default() };

        if mode.uses_preferences() {
            metrics.holdout_accuracy = self.learn_preferences(dataset, labels)?;
        }
        metrics.label_count = dataset.len();
        metrics.reward_model_version = self.reward_model.version();

        match mode {
            ExplorationMode::CdpGuided => self.refresh_region_and_codebook(&mut metrics)?,
            _ => self.train_discriminator()?,
        }

        let (returns, terms) = self.collect(&mut metrics)?;
        metrics.mean_oracle_return = mean(&returns);
        if !terms.is_empty() {
            let n = terms.len() as f64;
            metrics.mean_reward = terms.iter().map(|t| t.total).sum::<f64>() / n;
            metrics.mean_preference_term = terms.iter().map(|t| t.preference).sum::<f64>() / n;
            metrics.mean_novelty_term = terms.iter().map(|t| t.novelty).sum::<f64>() / n;
            metrics.mean_diversity_term = terms.iter().map(|t| t.diversity).sum::<f64>() / n;
        }
        metrics.policy_updates = self.policy.updates();
        metrics.transitions = self.buffer.len();
        self.epoch += 1;
        Ok(metrics)
    }

    /// Step (a). Returns the holdout accuracy when the model was trained.
    fn learn_preferences(
        &mut self,
        dataset: &mut PreferenceDataset,
        labels: &mut dyn LabelSource,
    ) -> Result<Option<f64>> {
        let budget = self.config.max_queries.saturating_sub(self.queries_asked).min(self.config.queries_per_epoch);
        let segments = self.buffer.segments(self.config.segment_len).len();
        if budget > 0 && segments >= 2 {
            let pairs = sample_queries(
                &self.buffer,
                self.config.segment_len,
                budget,
                self.config.query_strategy,
                &self.reward_model,
                &mut self.rng,
            )?;
            self.queries_asked += pairs.len();
            for record in labels.label(self.epoch, pairs)? {
                dataset.push(record)?;
            }
        }
        let (train, holdout) = dataset.split();
        if train.len() + holdout.len() < 2 || train.is_empty() {
            return Ok(None);
        }
        let report = self.reward_model.train(dataset, self.config.reward_steps, &mut self.rng)?;
        self.reward_trained = true;
        Ok(report.holdout_accuracy)
    }

    /// Steps (b) and (c).
    fn refresh_region_and_codebook(&mut self, metrics: &mut EpochMetrics) -> Result<()> {
        self.region = None;
        if self.buffer.is_empty() {
            return Ok(());
        }
        let candidates = self.buffer.recent_states(self.config.candidate_pool);
        let region = estimate_region_with_floor(
            &self.reward_model,
            &candidates,
            self.config.beta_region,
            self.config.min_region_members,
        )?;
        if region.model_version() != self.reward_model.version() {
            return Err(Error::state("region was not built from the freshly trained reward model"));
        }
        metrics.region_model_version = Some(region.model_version());
        metrics.region_size = region.members().len();
        self.codebook.fit_discovery(&region, Some(&self.reward_model), self.config.discovery_steps, &mut self.rng)?;
        metrics.codebook_version_fit = Some(self.codebook.version());
        metrics.codebook_usage = self.codebook.usage().to_vec();
        self.region = Some(region);
        Ok(())
    }

    /// Baseline counterpart of step (c): fit `q(z | s)` to buffered skills.
    fn train_discriminator(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let bs = self.policy.config().batch_size;
        for _ in 0..self.config.discriminator_steps {
            let batch = self.buffer.sample(bs, &mut self.rng)?;
            let states: Vec<EnvState> = batch.iter().map(|t| t.next_state).collect();
            let skills: Vec<usize> = batch.iter().map(|t| t.skill).collect();
            self.discriminator.train_step(&states, &skills)?;
        }
        Ok(())
    }

    fn rewards_ready(&self) -> bool {
        match self.config.mode {
            ExplorationMode::SmmBaseline => self.discriminator_ready(),
            ExplorationMode::SmmPrior => self.discriminator_ready() && self.reward_trained,
            ExplorationMode::CdpGuided => self.region.is_some() && self.codebook.is_trained(),
        }
    }

    fn discriminator_ready(&self) -> bool {
        !self.buffer.is_empty()
    }

    /// Relabels a batch with the current reward components.
    fn batch_rewards(&self, batch: &[&Transition]) -> Result<Vec<RewardTerms>> {
        let states: Vec<EnvState> = batch.iter().map(|t| t.next_state).collect();
        let skills: Vec<usize> = batch.iter().map(|t| t.skill).collect();
        let w = &self.config.weights;
        match self.config.mode {
            ExplorationMode::SmmBaseline => {
                let target = SmmTarget::Uniform { log_density: -self.env.state_box().volume().ln() };
                smm_rewards(&states, &skills, &self.density, &self.discriminator, target, &self.prior, w)
            }
            ExplorationMode::SmmPrior => {
                let target = SmmTarget::Learned(&self.reward_model);
                smm_rewards(&states, &skills, &self.density, &self.discriminator, target, &self.prior, w)
            }
            ExplorationMode::CdpGuided => {
                let region = self.region.as_ref().ok_or_else(|| Error::state("no current region"))?;
                guided_rewards(&states, &skills, &self.reward_model, &self.density, &self.codebook, region, w)
            }
        }
    }

    /// Step (d). Returns per-episode oracle returns and every reward computed
    /// for policy updates.
    fn collect(&mut self, metrics: &mut EpochMetrics) -> Result<(Vec<f64>, Vec<RewardTerms>)> {
        let codebook_version = self.codebook.version();
        let oracle = self.env.oracle();
        let sac = self.policy.config().clone();
        let mut returns = Vec::with_capacity(self.config.episodes_per_epoch);
        let mut logged = Vec::new();
        for _ in 0..self.config.episodes_per_epoch {
            let skill = self.prior.sample(&mut self.rng);
            let episode = self.next_episode;
            self.next_episode += 1;
            let mut state = self.env.reset();
            let mut ret = 0.0;
            for _ in 0..self.env.horizon() {
                let action = if self.env_steps < sac.learning_starts {
                    EnvAction((0..self.env.action_dim()).map(|_| self.rng.random_range(-1.0..=1.0)).collect())
                } else {
                    self.policy.select_action(&state, skill, false, &mut self.rng)?
                };
                let next = self.env.step(&state, &action)?;
                ret += oracle.evaluate(&next);
                self.density.observe(&next)?;
                self.buffer.push(Transition {
                    state,
                    action: action.0,
                    next_state: next,
                    skill,
                    done: false,
                    episode,
                })?;
                self.env_steps += 1;
                state = next;
                if self.env_steps >= sac.learning_starts && self.rewards_ready() {
                    for _ in 0..sac.updates_per_step {
                        let batch = self.buffer.sample(sac.batch_size, &mut self.rng)?;
                        let terms = self.batch_rewards(&batch)?;
                        let labelled: Vec<(&Transition, f64)> =
                            batch.iter().zip(&terms).map(|(t, r)| (*t, r.total)).collect();
                        self.policy.update(&labelled)?;
                        logged.extend(terms);
                    }
                }
            }
            returns.push(ret);
        }
        if self.config.mode == ExplorationMode::CdpGuided && self.region.is_some() {
            if self.codebook.version() != codebook_version {
                return Err(Error::state("codebook changed during rollouts"));
            }
            metrics.codebook_version_used = Some(codebook_version);
        }
        Ok((returns, logged))
    }
}

/// Runs every remaining epoch and returns their metrics.
pub fn run_guided_exploration(
    explorer: &mut Explorer,
    dataset: &mut PreferenceDataset,
    labels: &mut dyn LabelSource,
) -> Result<Vec<EpochMetrics>> {
    let mut rows = Vec::new();
    while !explorer.is_done() {
        rows.push(explorer.run_epoch(dataset, labels)?);
    }
    Ok(rows)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
