//! The preferred region: an upper level set of the learned reward over
//! buffered states, parameterized by a quantile `beta` in `[0, 1]`.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use serde::{Deserialize, Serialize};

use crate::envs::{EnvState, STATE_DIM};
use crate::error::{Error, Result};
use crate::preference::RewardModel;

/// Reward-space cutoff for quantile `beta`: with rewards sorted ascending,
/// the value at rank `floor(beta * (n - 1))`.
pub fn quantile_threshold(rewards: &[f64], beta: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::input("quantile of an empty reward set"));
    }
    check_beta(beta)?;
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    // The small nudge keeps e.g. 0.9 * 10 from flooring to 8.
    let rank = ((beta * (sorted.len() - 1) as f64) + 1e-9).floor() as usize;
    Ok(sorted[rank.min(sorted.len() - 1)])
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::input(format!("beta {beta} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl RewardSummary {
    fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self { min: v[0], median, max: v[n - 1] }
    }
}

/// Serializable view of a region for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSnapshot {
    pub epoch: usize,
    pub beta: f64,
    pub threshold: f64,
    pub members: Vec<[f64; STATE_DIM]>,
}

/// Candidate states, the members passing the threshold, and the reward
/// model version the threshold was computed with.
pub struct RegionEstimate {
    beta: f64,
    threshold: f64,
    model_version: u64,
    candidates: Vec<EnvState>,
    rewards: Vec<f64>,
    members: Vec<EnvState>,
    member_rewards: Vec<f64>,
    summary: RewardSummary,
    index: ImmutableKdTree<f64, STATE_DIM>,
}

impl Clone for RegionEstimate {
    fn clone(&self) -> Self {
        Self {
            beta: self.beta,
            threshold: self.threshold,
            model_version: self.model_version,
            candidates: self.candidates.clone(),
            rewards: self.rewards.clone(),
            members: self.members.clone(),
            member_rewards: self.member_rewards.clone(),
            summary: self.summary,
            index: index_members(&self.members).expect("members were indexable when first built"),
        }
    }
}

fn index_members(members: &[EnvState]) -> Result<ImmutableKdTree<f64, STATE_DIM>> {
    let coords: Vec<[f64; STATE_DIM]> = members.iter().map(|s| s.0).collect();
    ImmutableKdTree::new_from_slice(&coords).map_err(|e| Error::state(format!("cannot index region members: {e:?}")))
}

impl std::fmt::Debug for RegionEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegionEstimate")
            .field("beta", &self.beta)
            .field("threshold", &self.threshold)
            .field("model_version", &self.model_version)
            .field("candidates", &self.candidates.len())
            .field("members", &self.members.len())
            .finish()
    }
}

impl RegionEstimate {
    /// Region from already-computed rewards. `rewards[i]` belongs to
    /// `candidates[i]`.
    pub fn from_rewards(
        candidates: Vec<EnvState>,
        rewards: Vec<f64>,
        beta: f64,
        model_version: u64,
    ) -> Result<Self> {
        Self::build(candidates, rewards, beta, model_version, 0)
    }

    fn build(
        candidates: Vec<EnvState>,
        rewards: Vec<f64>,
        beta: f64,
        model_version: u64,
        min_members: usize,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::input("region estimation needs candidate states"));
        }
        if candidates.len() != rewards.len() {
            return Err(Error::input("one reward per candidate required"));
        }
        if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(Error::input(format!("predicted reward of candidate {i} is not finite")));
        }
        let mut threshold = quantile_threshold(&rewards, beta)?;
        let passing = rewards.iter().filter(|&&r| r >= threshold).count();
        if passing < min_members {
            // Relax to the top `min_members` rewards, ties included.
            let mut sorted = rewards.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            threshold = sorted[min_members.min(sorted.len()) - 1];
        }
        let mut members = Vec::new();
        let mut member_rewards = Vec::new();
        for (s, &r) in candidates.iter().zip(&rewards) {
            if r >= threshold {
                members.push(*s);
                member_rewards.push(r);
            }
        }
        let index = index_members(&members)?;
        let summary = RewardSummary::of(&rewards);
        Ok(Self { beta, threshold, model_version, candidates, rewards, members, member_rewards, summary, index })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn model_version(&self) -> u64 {
        self.model_version
    }

    pub fn candidates(&self) -> &[EnvState] {
        &self.candidates
    }

    pub fn candidate_rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn members(&self) -> &[EnvState] {
        &self.members
    }

    pub fn member_rewards(&self) -> &[f64] {
        &self.member_rewards
    }

    pub fn summary(&self) -> RewardSummary {
        self.summary
    }

    fn check_model(&self, model: &RewardModel) -> Result<()> {
        if model.version() != self.model_version {
            return Err(Error::state(format!(
                "region was built with reward model version {}, model is at {}",
                self.model_version,
                model.version()
            )));
        }
        Ok(())
    }

    /// States passing the membership test, in input order.
    pub fn filter_states(&self, model: &RewardModel, states: &[EnvState]) -> Result<Vec<EnvState>> {
        self.check_model(model)?;
        let rewards = model.predict_rewards(states);
        Ok(states.iter().zip(rewards).filter(|(_, r)| *r >= self.threshold).map(|(s, _)| *s).collect())
    }

    /// Nearest region member to `state` in Euclidean distance.
    pub fn nearest_member(&self, state: &EnvState) -> &EnvState {
        let hit = self.index.query(&state.0).nearest_one::<SquaredEuclidean<f64>>().execute();
        &self.members[hit.item as usize]
    }

    pub fn snapshot(&self, epoch: usize) -> RegionSnapshot {
        RegionSnapshot {
            epoch,
            beta: self.beta,
            threshold: self.threshold,
            members: self.members.iter().map(|s| s.0).collect(),
        }
    }
}

/// Quantile region of `model`'s reward over `candidates`.
pub fn estimate_region(model: &RewardModel, candidates: &[EnvState], beta: f64) -> Result<RegionEstimate> {
    estimate_region_with_floor(model, candidates, beta, 0)
}

/// Like [`estimate_region`], but relaxes the threshold so that at least
/// `min_members` candidates (or all of them, if fewer) are members.
pub fn estimate_region_with_floor(
    model: &RewardModel,
    candidates: &[EnvState],
    beta: f64,
    min_members: usize,
) -> Result<RegionEstimate> {
    if candidates.is_empty() {
        return Err(Error::input("region estimation needs candidate states"));
    }
    check_beta(beta)?;
    let rewards = model.predict_rewards(candidates);
    RegionEstimate::build(candidates.to_vec(), rewards, beta, model.version(), min_members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::InputScaler;
    use crate::preference::RewardModelConfig;
    use proptest::prelude::*;

    fn states(n: usize) -> Vec<EnvState> {
        (0..n).map(|i| EnvState::new(i as f64, 0.0)).collect()
    }

    #[test]
    fn quantile_examples() {
        let r = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let half = RegionEstimate::from_rewards(states(5), r.clone(), 0.5, 0).unwrap();
        assert_eq!(half.member_rewards(), &[0.5, 0.75, 1.0]);
        let all = RegionEstimate::from_rewards(states(5), r.clone(), 0.0, 0).unwrap();
        assert_eq!(all.members().len(), 5);
        let top = RegionEstimate::from_rewards(states(5), r, 1.0, 0).unwrap();
        assert_eq!(top.member_rewards(), &[1.0]);
    }

    #[test]
    fn ties_at_the_threshold_are_kept() {
        let r = vec![0.1, 0.5, 0.5, 0.5, 0.9];
        let region = RegionEstimate::from_rewards(states(5), r, 0.5, 0).unwrap();
        assert_eq!(region.threshold(), 0.5);
        assert_eq!(region.members().len(), 4);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(RegionEstimate::from_rewards(vec![], vec![], 0.5, 0), Err(Error::Input(_))));
        assert!(matches!(RegionEstimate::from_rewards(states(2), vec![0.0, 1.0], 1.5, 0), Err(Error::Input(_))));
        assert!(matches!(RegionEstimate::from_rewards(states(2), vec![0.0, 1.0], -0.1, 0), Err(Error::Input(_))));
    }

    #[test]
    fn floor_relaxes_to_top_n() {
        let r: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let region = RegionEstimate::build(states(20), r, 1.0, 0, 5).unwrap();
        assert_eq!(region.members().len(), 5);
        assert_eq!(region.threshold(), 15.0);
    }

    #[test]
    fn filter_is_idempotent_and_checks_version() {
        let mut model = RewardModel::new(RewardModelConfig::default(), InputScaler::identity(2), 1).unwrap();
        let cands: Vec<EnvState> = (0..200).map(|i| EnvState::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
        let region = estimate_region(&model, &cands, 0.6).unwrap();
        assert_eq!(region.filter_states(&model, &cands).unwrap(), region.members());
        assert!(region.filter_states(&model, &[]).unwrap().is_empty());
        let p = model.parameters();
        model.set_parameters(&p).unwrap();
        assert!(matches!(region.filter_states(&model, &cands), Err(Error::State(_))));
    }

    #[test]
    fn nearest_member_is_exact() {
        let cands: Vec<EnvState> = (0..50).map(|i| EnvState::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos())).collect();
        let rewards: Vec<f64> = (0..50).map(|i| (i % 7) as f64).collect();
        let region = RegionEstimate::from_rewards(cands, rewards, 0.5, 0).unwrap();
        for k in 0..40 {
            let q = EnvState::new((k as f64 * 0.3).cos(), (k as f64 * 0.9).sin());
            let best = region
                .members()
                .iter()
                .map(|m| m.squared_distance(&q))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(region.nearest_member(&q).squared_distance(&q), best);
        }
    }

    proptest! {
        #[test]
        fn membership_is_monotone_in_beta(
            rewards in prop::collection::vec(-1.0f64..1.0, 1..60),
            b1 in 0.0f64..=1.0,
            b2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let n = rewards.len();
            let a = RegionEstimate::from_rewards(states(n), rewards.clone(), lo, 0).unwrap();
            let b = RegionEstimate::from_rewards(states(n), rewards, hi, 0).unwrap();
            prop_assert!(b.members().iter().all(|s| a.members().contains(s)));
            let min_in = b.member_rewards().iter().copied().fold(f64::INFINITY, f64::min);
            let max_out = b.candidate_rewards().iter().copied().filter(|r| *r < b.threshold()).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_in >= max_out);
        }
    }
}
