use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Label, PreferenceDataset, PreferencePair, PreferenceRecord};
use crate::envs::EnvState;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Activation, Adam, InputScaler, Mlp, MlpGrads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardModelConfig {
    pub hidden: Vec<usize>,
    /// Width of the last hidden layer, the latent representation.
    pub latent_dim: usize,
    pub ensemble_size: usize,
    pub lr: f64,
    /// Pairs per gradient step.
    pub batch_size: usize,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], latent_dim: 32, ensemble_size: 1, lr: 1e-3, batch_size: 32 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Member {
    /// State to latent; every layer uses tanh.
    features: Mlp,
    /// Latent to reward, tanh-bounded.
    head: Mlp,
    opt: Adam,
}

/// Per-member gradients in the same order as [`RewardModel::parameters`].
#[derive(Clone, Debug)]
pub struct RewardGrads {
    members: Vec<(MlpGrads, MlpGrads)>,
}

impl RewardGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        self.members.iter().flat_map(|(f, h)| f.to_flat().into_iter().chain(h.to_flat())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Minibatch updates applied to each member.
    pub steps: usize,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    /// Mean Bradley-Terry loss over the training split after training.
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// `None` when the holdout split is empty.
    pub holdout_accuracy: Option<f64>,
}

/// Ensemble of state-only reward networks trained from pairwise preferences.
///
/// Each member is `head ∘ features`. The model's reward is the mean of the
/// member rewards; its latent vector is the concatenation of the member
/// latents, so `head(latent_features(s)) == predict_reward(s)` holds for any
/// ensemble size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RewardModel {
    config: RewardModelConfig,
    scaler: InputScaler,
    members: Vec<Member>,
    version: u64,
}

impl RewardModel {
    pub fn new(config: RewardModelConfig, scaler: InputScaler, seed: u64) -> Result<Self> {
        if config.ensemble_size == 0 || config.latent_dim == 0 || config.batch_size == 0 {
            return Err(Error::config("reward model needs positive ensemble size, latent width and batch size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![scaler.dim()];
        sizes.extend(&config.hidden);
        sizes.push(config.latent_dim);
        let members = (0..config.ensemble_size)
            .map(|_| Member {
                features: Mlp::new(&sizes, Activation::Tanh, Activation::Tanh, &mut rng),
                head: Mlp::new(&[config.latent_dim, 1], Activation::Identity, Activation::Tanh, &mut rng),
                opt: Adam::new(config.lr),
            })
            .collect();
        Ok(Self { config, scaler, members, version: 0 })
    }

    pub fn config(&self) -> &RewardModelConfig {
        &self.config
    }

    /// Bumped every time the parameters change.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    /// Dimension of [`latent_features`](Self::latent_features).
    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim * self.members.len()
    }

    fn inputs(&self, states: &[EnvState]) -> Array2<f64> {
        let dim = self.scaler.dim();
        Array2::from_shape_fn((states.len(), dim), |(i, j)| {
            (states[i].0[j] - self.scaler.center[j]) / self.scaler.half_range[j]
        })
    }

    pub fn latent_features(&self, state: &EnvState) -> Vec<f64> {
        self.latent_batch(std::slice::from_ref(state)).row(0).to_vec()
    }

    /// Latent vectors of many states, one row per state.
    pub fn latent_batch(&self, states: &[EnvState]) -> Array2<f64> {
        let x = self.inputs(states);
        let h = self.config.latent_dim;
        let mut out = Array2::zeros((states.len(), self.latent_dim()));
        for (e, m) in self.members.iter().enumerate() {
            out.slice_mut(s![.., e * h..(e + 1) * h]).assign(&m.features.forward(&x.view()));
        }
        out
    }

    /// Maps latent vectors (rows) to rewards.
    pub fn head_batch(&self, latents: &Array2<f64>) -> Vec<f64> {
        let h = self.config.latent_dim;
        let mut total = vec![0.0; latents.nrows()];
        for (e, m) in self.members.iter().enumerate() {
            let r = m.head.forward(&latents.slice(s![.., e * h..(e + 1) * h]));
            for (t, v) in total.iter_mut().zip(r.column(0)) {
                *t += v;
            }
        }
        let k = self.members.len() as f64;
        total.iter_mut().for_each(|t| *t /= k);
        total
    }

    pub fn head(&self, latent: &[f64]) -> Result<f64> {
        if latent.len() != self.latent_dim() {
            return Err(Error::input(format!("latent has {} entries, expected {}", latent.len(), self.latent_dim())));
        }
        let row = Array2::from_shape_vec((1, latent.len()), latent.to_vec()).expect("shape matches");
        Ok(self.head_batch(&row)[0])
    }

    pub fn predict_reward(&self, state: &EnvState) -> f64 {
        self.predict_rewards(std::slice::from_ref(state))[0]
    }

    pub fn predict_rewards(&self, states: &[EnvState]) -> Vec<f64> {
        if states.is_empty() {
            return Vec::new();
        }
        self.head_batch(&self.latent_batch(states))
    }

    fn member_rewards(&self, e: usize, states: &[EnvState]) -> Vec<f64> {
        let m = &self.members[e];
        let lat = m.features.forward(&self.inputs(states).view());
        m.head.forward(&lat.view()).column(0).to_vec()
    }

    /// `P[first ≻ second]` under the Bradley-Terry model on summed rewards.
    pub fn predict_preference(&self, pair: &PreferencePair) -> Result<f64> {
        check_pair(pair)?;
        let r0: f64 = self.predict_rewards(&pair.first.states).iter().sum();
        let r1: f64 = self.predict_rewards(&pair.second.states).iter().sum();
        Ok(preference_from_sums(r0, r1))
    }

    /// Each member's own preference probability.
    pub fn member_preferences(&self, pair: &PreferencePair) -> Result<Vec<f64>> {
        check_pair(pair)?;
        Ok((0..self.members.len())
            .map(|e| {
                let r0: f64 = self.member_rewards(e, &pair.first.states).iter().sum();
                let r1: f64 = self.member_rewards(e, &pair.second.states).iter().sum();
                preference_from_sums(r0, r1)
            })
            .collect())
    }

    /// Population variance of the member preference probabilities.
    pub fn preference_variance(&self, pair: &PreferencePair) -> Result<f64> {
        let p = self.member_preferences(pair)?;
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        Ok(p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p.len() as f64)
    }

    /// Mean Bradley-Terry cross-entropy over `batch`, averaged over members,
    /// with its gradient.
    pub fn reward_loss(&self, batch: &[(&PreferencePair, Label)]) -> Result<(f64, RewardGrads)> {
        let batch = targets(batch)?;
        let k = self.members.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(self.members.len());
        for e in 0..self.members.len() {
            let (l, mut g) = self.member_loss(e, &batch);
            loss += l / k;
            g.0.scale(1.0 / k);
            g.1.scale(1.0 / k);
            grads.push(g);
        }
        Ok((loss, RewardGrads { members: grads }))
    }

    fn member_loss(&self, e: usize, batch: &[(&PreferencePair, (f64, f64))]) -> (f64, (MlpGrads, MlpGrads)) {
        let m = &self.members[e];
        let mut states = Vec::new();
        let mut spans = Vec::with_capacity(batch.len());
        for (pair, _) in batch {
            let a = states.len();
            states.extend_from_slice(&pair.first.states);
            let b = states.len();
            states.extend_from_slice(&pair.second.states);
            spans.push((a, b, states.len()));
        }
        let x = self.inputs(&states);
        let fc = m.features.forward_cached(&x.view());
        let hc = m.head.forward_cached(&fc.output().view());
        let r = hc.output();
        let nf = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad_r = Array2::zeros((states.len(), 1));
        for ((_, (y0, y1)), &(a, b, c)) in batch.iter().zip(&spans) {
            let r0: f64 = (a..b).map(|i| r[[i, 0]]).sum();
            let r1: f64 = (b..c).map(|i| r[[i, 0]]).sum();
            let delta = r0 - r1;
            loss += (y0 * softplus(-delta) + y1 * softplus(delta)) / nf;
            let g = (-y0 * sigmoid(-delta) + y1 * sigmoid(delta)) / nf;
            for i in a..b {
                grad_r[[i, 0]] = g;
            }
            for i in b..c {
                grad_r[[i, 0]] = -g;
            }
        }
        let (head_grads, grad_latent) = m.head.backward(&hc, grad_r);
        let (feature_grads, _) = m.features.backward(&fc, grad_latent);
        (loss, (feature_grads, head_grads))
    }

    /// All parameters, member by member (features, then head).
    pub fn parameters(&self) -> Vec<f64> {
        self.members.iter().flat_map(|m| m.features.to_flat().into_iter().chain(m.head.to_flat())).collect()
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.members.iter().map(|m| m.features.num_params() + m.head.num_params()).sum();
        if flat.len() != total {
            return Err(Error::input(format!("expected {total} parameters, got {}", flat.len())));
        }
        let mut at = 0;
        for m in &mut self.members {
            let nf = m.features.num_params();
            m.features.set_flat(&flat[at..at + nf]);
            at += nf;
            let nh = m.head.num_params();
            m.head.set_flat(&flat[at..at + nh]);
            at += nh;
        }
        self.version += 1;
        Ok(())
    }

    /// Fraction of non-skip records whose label agrees with the model.
    pub fn accuracy(&self, records: &[&PreferenceRecord]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for r in records {
            let p = self.predict_preference(&r.pair)?;
            match r.label {
                Label::First => correct += (p > 0.5) as usize,
                Label::Second => correct += (p < 0.5) as usize,
                Label::Skip => continue,
            }
            total += 1;
        }
        if total == 0 {
            return Err(Error::input("accuracy needs at least one non-skip record"));
        }
        Ok(correct as f64 / total as f64)
    }

    /// `steps` minibatch Adam updates per member on the Bradley-Terry loss.
    /// Every member walks its own shuffles of the training split.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        dataset: &PreferenceDataset,
        steps: usize,
        rng: &mut R,
    ) -> Result<TrainingReport> {
        let (train, holdout) = dataset.split();
        let usable = train.len() + holdout.len();
        if usable < 2 {
            return Err(Error::state(format!("reward training needs two labelled pairs, dataset has {usable}")));
        }
        if train.is_empty() {
            return Err(Error::state("reward training split is empty"));
        }
        let pairs: Vec<(&PreferencePair, (f64, f64))> =
            train.iter().map(|r| (&r.pair, r.label.target().expect("split drops skips"))).collect();
        let bs = self.config.batch_size.min(pairs.len());
        for e in 0..self.members.len() {
            let mut done = 0;
            while done < steps {
                let mut order: Vec<usize> = (0..pairs.len()).collect();
                order.shuffle(rng);
                for chunk in order.chunks(bs).take(steps - done) {
                    let batch: Vec<_> = chunk.iter().map(|&i| pairs[i]).collect();
                    let (_, (gf, gh)) = self.member_loss(e, &batch);
                    let m = &mut self.members[e];
                    let mut params = m.features.param_slices_mut();
                    params.extend(m.head.param_slices_mut());
                    let mut g = gf.slices();
                    g.extend(gh.slices());
                    m.opt.step(params, g);
                    done += 1;
                }
            }
        }
        if steps > 0 {
            self.version += 1;
        }
        let labelled: Vec<(&PreferencePair, Label)> = train.iter().map(|r| (&r.pair, r.label)).collect();
        let (train_loss, _) = self.reward_loss(&labelled)?;
        Ok(TrainingReport {
            steps,
            train_pairs: train.len(),
            holdout_pairs: holdout.len(),
            train_loss,
            train_accuracy: self.accuracy(&train)?,
            holdout_accuracy: if holdout.is_empty() { None } else { Some(self.accuracy(&holdout)?) },
        })
    }
}

fn check_pair(pair: &PreferencePair) -> Result<()> {
    if pair.first.len() != pair.second.len() {
        return Err(Error::input(format!(
            "segment lengths differ: {} vs {}",
            pair.first.len(),
            pair.second.len()
        )));
    }
    if pair.first.is_empty() {
        return Err(Error::input("segments are empty"));
    }
    Ok(())
}

fn targets<'a>(batch: &[(&'a PreferencePair, Label)]) -> Result<Vec<(&'a PreferencePair, (f64, f64))>> {
    if batch.is_empty() {
        return Err(Error::input("reward loss needs a nonempty batch"));
    }
    batch
        .iter()
        .enumerate()
        .map(|(i, (pair, label))| {
            check_pair(pair)?;
            let y = label.target().ok_or_else(|| Error::input(format!("batch entry {i} is labelled skip")))?;
            Ok((*pair, y))
        })
        .collect()
}

/// `exp(r0) / (exp(r0) + exp(r1))`, evaluated as a logistic of the gap.
pub fn preference_from_sums(r0: f64, r1: f64) -> f64 {
    sigmoid(r0 - r1)
}

#[cfg(test)]
mod tests {
    use super::super::dataset::{Labeler, Segment};
    use super::*;

    fn tiny(seed: u64) -> RewardModel {
        let cfg = RewardModelConfig { hidden: vec![5], latent_dim: 4, ..RewardModelConfig::default() };
        RewardModel::new(cfg, InputScaler::identity(2), seed).unwrap()
    }

    fn random_segment<R: Rng>(rng: &mut R, len: usize) -> Segment {
        Segment {
            episode: rng.random_range(0..100),
            offset: 0,
            states: (0..len).map(|_| EnvState::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect(),
        }
    }

    #[test]
    fn preference_examples() {
        assert_eq!(preference_from_sums(2.0, 2.0), 0.5);
        assert!((preference_from_sums(3f64.ln(), 0.0) - 0.75).abs() < 1e-12);
        let p = preference_from_sums(700.0, -700.0);
        assert!(p.is_finite() && p <= 1.0);
    }

    #[test]
    fn uniform_prediction_gives_ln_two() {
        let mut model = tiny(0);
        let zeros = vec![0.0; model.parameters().len()];
        model.set_parameters(&zeros).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<PreferencePair> =
            (0..4).map(|_| PreferencePair { first: random_segment(&mut rng, 3), second: random_segment(&mut rng, 3) }).collect();
        let batch: Vec<_> = pairs.iter().map(|p| (p, Label::First)).collect();
        let (loss, _) = model.reward_loss(&batch).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn skip_and_mismatch_are_input_errors() {
        let model = tiny(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = PreferencePair { first: random_segment(&mut rng, 3), second: random_segment(&mut rng, 3) };
        assert!(matches!(model.reward_loss(&[(&pair, Label::Skip)]), Err(Error::Input(_))));
        let bad = PreferencePair { first: random_segment(&mut rng, 3), second: random_segment(&mut rng, 2) };
        assert!(matches!(model.predict_preference(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn decomposition_identity_holds_for_ensembles() {
        let cfg = RewardModelConfig { ensemble_size: 3, ..RewardModelConfig::default() };
        let model = RewardModel::new(cfg, InputScaler::identity(2), 4).unwrap();
        assert_eq!(model.latent_dim(), 96);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = EnvState::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            assert_eq!(model.head(&model.latent_features(&s)).unwrap(), model.predict_reward(&s));
        }
    }

    #[test]
    fn memorizes_a_duplicated_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pair = PreferencePair { first: random_segment(&mut rng, 5), second: random_segment(&mut rng, 5) };
        let mut ds = PreferenceDataset::new(0.2).unwrap();
        for i in 0..100 {
            ds.push(PreferenceRecord::new(format!("{i}"), pair.clone(), Label::Second, Labeler::Oracle)).unwrap();
        }
        let mut model = RewardModel::new(RewardModelConfig::default(), InputScaler::identity(2), 3).unwrap();
        let v0 = model.version();
        let report = model.train(&ds, 15, &mut rng).unwrap();
        assert_eq!(report.holdout_accuracy, Some(1.0));
        assert!(model.version() > v0);
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..5 {
            let mut model = tiny(seed);
            let pairs: Vec<PreferencePair> =
                (0..3).map(|_| PreferencePair { first: random_segment(&mut rng, 4), second: random_segment(&mut rng, 4) }).collect();
            let labels = [Label::First, Label::Second, Label::First];
            let batch: Vec<_> = pairs.iter().zip(labels).collect();
            let (_, grads) = model.reward_loss(&batch).unwrap();
            let analytic = grads.to_flat();
            let base = model.parameters();
            let h = 1e-5;
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                model.set_parameters(&p).unwrap();
                let up = model.reward_loss(&batch).unwrap().0;
                p[i] -= 2.0 * h;
                model.set_parameters(&p).unwrap();
                let down = model.reward_loss(&batch).unwrap().0;
                let numeric = (up - down) / (2.0 * h);
                let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
                assert!((analytic[i] - numeric).abs() / scale < 1e-4, "param {i}: {} vs {numeric}", analytic[i]);
            }
        }
    }

    #[test]
    fn empty_dataset_is_a_state_error() {
        let ds = PreferenceDataset::new(0.2).unwrap();
        let mut model = tiny(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(model.train(&ds, 1, &mut rng), Err(Error::State(_))));
    }
}
