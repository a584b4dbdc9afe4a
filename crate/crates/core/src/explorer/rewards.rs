use serde::{Deserialize, Serialize};

use super::density::DensityModel;
use super::discriminator::BaselineDiscriminator;
use crate::envs::EnvState;
use crate::error::{Error, Result};
use crate::preference::RewardModel;
use crate::region::RegionEstimate;
use crate::rl::SkillPrior;
use crate::vqvae::SkillCodebook;

/// Multipliers on the three reward components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub preference: f64,
    pub novelty: f64,
    pub diversity: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { preference: 1.0, novelty: 1.0, diversity: 1.0 }
    }
}

/// Weighted reward components and their sum.
///
/// For the marginal-matching rewards `preference` holds the target
/// log-density term, `novelty` is `-log ρ(s)` and `diversity` is
/// `log q(z | s) - log p(z)`. For the guided reward `preference` is the
/// learned reward and `diversity` the codebook log-likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub preference: f64,
    pub novelty: f64,
    pub diversity: f64,
    pub total: f64,
}

impl RewardTerms {
    fn weighted(weights: &RewardWeights, preference: f64, novelty: f64, diversity: f64) -> Self {
        let preference = weights.preference * preference;
        let novelty = weights.novelty * novelty;
        let diversity = weights.diversity * diversity;
        Self { preference, novelty, diversity, total: preference + novelty + diversity }
    }
}

/// Target distribution for marginal matching.
#[derive(Clone, Copy, Debug)]
pub enum SmmTarget<'a> {
    /// Constant log-density, e.g. `-ln(volume)` for a uniform target.
    Uniform { log_density: f64 },
    /// The learned reward stands in for the target log-density.
    Learned(&'a RewardModel),
}

pub fn smm_reward(
    state: &EnvState,
    skill: usize,
    density: &DensityModel,
    discriminator: &BaselineDiscriminator,
    target: SmmTarget<'_>,
    prior: &SkillPrior,
    weights: &RewardWeights,
) -> Result<RewardTerms> {
    let terms = smm_rewards(&[*state], &[skill], density, discriminator, target, prior, weights)?;
    Ok(terms[0])
}

/// Batched [`smm_reward`].
pub fn smm_rewards(
    states: &[EnvState],
    skills: &[usize],
    density: &DensityModel,
    discriminator: &BaselineDiscriminator,
    target: SmmTarget<'_>,
    prior: &SkillPrior,
    weights: &RewardWeights,
) -> Result<Vec<RewardTerms>> {
    check_batch(states, skills, prior)?;
    let targets = match target {
        SmmTarget::Uniform { log_density } => vec![log_density; states.len()],
        SmmTarget::Learned(model) => model.predict_rewards(states),
    };
    let log_q = discriminator.log_probs(states, skills)?;
    states
        .iter()
        .zip(skills)
        .enumerate()
        .map(|(i, (s, &z))| {
            let novelty = -density.log_prob(s)?;
            Ok(RewardTerms::weighted(weights, targets[i], novelty, log_q[i] - prior.log_prob(z)))
        })
        .collect()
}

pub fn guided_reward(
    state: &EnvState,
    skill: usize,
    model: &RewardModel,
    density: &DensityModel,
    codebook: &SkillCodebook,
    region: &RegionEstimate,
    weights: &RewardWeights,
) -> Result<RewardTerms> {
    let terms = guided_rewards(&[*state], &[skill], model, density, codebook, region, weights)?;
    Ok(terms[0])
}

/// Batched [`guided_reward`]. The codebook term is evaluated at each state's
/// nearest region member.
pub fn guided_rewards(
    states: &[EnvState],
    skills: &[usize],
    model: &RewardModel,
    density: &DensityModel,
    codebook: &SkillCodebook,
    region: &RegionEstimate,
    weights: &RewardWeights,
) -> Result<Vec<RewardTerms>> {
    if states.len() != skills.len() {
        return Err(Error::input("one skill per state required"));
    }
    if region.model_version() != model.version() {
        return Err(Error::state(format!(
            "region is stale: built with reward model version {}, model is at {}",
            region.model_version(),
            model.version()
        )));
    }
    if !codebook.is_trained() {
        return Err(Error::state("guided reward needs a trained codebook"));
    }
    let rewards = model.predict_rewards(states);
    let anchors: Vec<EnvState> = states.iter().map(|s| *region.nearest_member(s)).collect();
    let inputs = codebook.inputs_for(&anchors, Some(model))?;
    states
        .iter()
        .zip(skills)
        .enumerate()
        .map(|(i, (s, &z))| {
            let novelty = -density.log_prob(s)?;
            let ll = codebook.log_likelihood(inputs.row(i).as_slice().expect("row-major"), z)?;
            Ok(RewardTerms::weighted(weights, rewards[i], novelty, ll))
        })
        .collect()
}

fn check_batch(states: &[EnvState], skills: &[usize], prior: &SkillPrior) -> Result<()> {
    if states.len() != skills.len() {
        return Err(Error::input("one skill per state required"));
    }
    if let Some(&z) = skills.iter().find(|&&z| z >= prior.len()) {
        return Err(Error::input(format!("skill {z} out of range for {} skills", prior.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::StateBox;
    use crate::nn::InputScaler;

    #[test]
    fn weighted_terms_sum_exactly() {
        let t = RewardTerms::weighted(&RewardWeights::default(), 0.5, 2.0, -1.0);
        assert_eq!(t.total, 1.5);
        assert_eq!(t.total, t.preference + t.novelty + t.diversity);
    }

    #[test]
    fn uniform_classifier_zeroes_the_diversity_term() {
        let bounds = StateBox { low: [-1.0, -1.0], high: [1.0, 1.0] };
        let density = DensityModel::new(bounds, 20, 1.0).unwrap();
        let mut disc = BaselineDiscriminator::new(InputScaler::identity(2), 10, &[8], 1e-3, 0).unwrap();
        disc.zero_output_layer();
        let prior = SkillPrior::uniform(10).unwrap();
        let target = SmmTarget::Uniform { log_density: -(4.0f64).ln() };
        let t = smm_reward(&EnvState::new(0.2, 0.3), 4, &density, &disc, target, &prior, &RewardWeights::default())
            .unwrap();
        assert!(t.diversity.abs() < 1e-12);
        // Uniform target and uniform density cancel.
        assert!((t.preference + t.novelty).abs() < 1e-12);
    }
}
