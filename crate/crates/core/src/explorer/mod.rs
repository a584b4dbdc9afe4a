//! Guided exploration. Each epoch (a) learns the preference reward from fresh
//! labels, (b) re-estimates the preferred region, (c) refits the skill
//! codebook on it, and (d) collects rollouts while training the exploration
//! policy on the composite reward. The marginal-matching baselines share the
//! loop but swap (b) and (c) for a skill classifier and a density target.

mod density;
mod discriminator;
mod rewards;
mod run;

pub use density::DensityModel;
pub use discriminator::{BaselineDiscriminator, LOG_FLOOR};
pub use rewards::{guided_reward, guided_rewards, smm_reward, smm_rewards, RewardTerms, RewardWeights, SmmTarget};
pub use run::{
    run_guided_exploration, EpochMetrics, ExplorationConfig, ExplorationMode, Explorer, LabelSource, OracleLabels,
};
