//! Vector-quantized autoencoder used as the skill discriminator.
//!
//! Codes index skills. The decoder mean at a code's embedding is that skill's
//! centroid, and the decoder defines a unit-variance Gaussian likelihood over
//! the input space. The encoder and decoder normalize internally, but all
//! inputs, centroids and likelihoods are in the caller's units.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvState;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, InputScaler, Mlp, MlpGrads};
use crate::preference::RewardModel;
use crate::region::RegionEstimate;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Space the codebook models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpace {
    #[default]
    RawState,
    /// The reward model's latent features of the state.
    PreferredLatent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub num_codes: usize,
    pub code_dim: usize,
    pub hidden: Vec<usize>,
    pub beta_commit: f64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self { num_codes: 10, code_dim: 16, hidden: vec![64, 64], beta_commit: 0.25, lr: 1e-3, batch_size: 64 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLossReport {
    /// Mean negative log-likelihood of the inputs under the decoder.
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// `reconstruction + codebook + beta_commit * commitment`.
    pub total: f64,
}

/// Which loss terms contribute gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub reconstruction: bool,
    pub codebook: bool,
    pub commitment: bool,
}

impl LossTerms {
    pub const ALL: Self = Self { reconstruction: true, codebook: true, commitment: true };
}

/// Sub-networks whose parameters are held fixed during a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Frozen {
    pub encoder: bool,
    pub codebook: bool,
    pub decoder: bool,
}

#[derive(Clone, Debug)]
pub struct VqGrads {
    pub encoder: MlpGrads,
    pub codebook: Array2<f64>,
    pub decoder: MlpGrads,
    /// Gradient reaching the encoder output, `d loss / d z_e`.
    pub encoder_output: Array2<f64>,
    /// Gradient of the reconstruction term at the decoder input.
    pub decoder_input: Array2<f64>,
    pub codes: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkillCodebook {
    config: VqConfig,
    input_space: InputSpace,
    scaler: InputScaler,
    encoder: Mlp,
    decoder: Mlp,
    embeddings: Array2<f64>,
    /// Decoder means of every code, in input units.
    centroids: Array2<f64>,
    encoder_opt: Adam,
    decoder_opt: Adam,
    embedding_opt: Adam,
    initialized: bool,
    usage: Vec<u64>,
    version: u64,
    reward_model_version: Option<u64>,
    rng: ChaCha8Rng,
}

impl SkillCodebook {
    /// `scaler` maps inputs to roughly unit range for the networks.
    pub fn new(config: VqConfig, input_space: InputSpace, scaler: InputScaler, seed: u64) -> Result<Self> {
        if config.num_codes == 0 || config.code_dim == 0 || config.batch_size == 0 {
            return Err(Error::config("codebook needs positive code count, code width and batch size"));
        }
        if !(config.beta_commit >= 0.0) {
            return Err(Error::config("beta_commit must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = scaler.dim();
        let mut enc_sizes = vec![d];
        enc_sizes.extend(&config.hidden);
        enc_sizes.push(config.code_dim);
        let mut dec_sizes = vec![config.code_dim];
        dec_sizes.extend(&config.hidden);
        dec_sizes.push(d);
        let encoder = Mlp::new(&enc_sizes, Activation::Relu, Activation::Identity, &mut rng);
        let decoder = Mlp::new(&dec_sizes, Activation::Relu, Activation::Identity, &mut rng);
        let embeddings = Array2::from_shape_fn((config.num_codes, config.code_dim), |_| rng.random_range(-1.0..1.0));
        let mut cb = Self {
            input_space,
            scaler,
            encoder,
            decoder,
            embeddings,
            centroids: Array2::zeros((config.num_codes, d)),
            encoder_opt: Adam::new(config.lr),
            decoder_opt: Adam::new(config.lr),
            embedding_opt: Adam::new(config.lr),
            initialized: false,
            usage: vec![0; config.num_codes],
            version: 0,
            reward_model_version: None,
            rng,
            config,
        };
        cb.refresh_centroids();
        Ok(cb)
    }

    pub fn config(&self) -> &VqConfig {
        &self.config
    }

    pub fn num_codes(&self) -> usize {
        self.config.num_codes
    }

    pub fn input_dim(&self) -> usize {
        self.scaler.dim()
    }

    pub fn input_space(&self) -> InputSpace {
        self.input_space
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// True once at least one training step has run.
    pub fn is_trained(&self) -> bool {
        self.initialized
    }

    /// Reward model version the latent inputs were computed with.
    pub fn reward_model_version(&self) -> Option<u64> {
        self.reward_model_version
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    /// Encoder and decoder weights, flattened.
    pub fn network_parameters(&self) -> (Vec<f64>, Vec<f64>) {
        (self.encoder.to_flat(), self.decoder.to_flat())
    }

    /// Code assignment counts since the last reset.
    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    fn refresh_centroids(&mut self) {
        let mut mu = self.decoder.forward(&self.embeddings.view());
        self.scaler.denormalize_inplace(&mut mu);
        self.centroids = mu;
    }

    fn check_dim(&self, got: usize, what: &str) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::input(format!("{what} has dimension {got}, codebook expects {}", self.input_dim())));
        }
        Ok(())
    }

    /// Nearest embedding to `z_e`; ties go to the lowest index.
    pub fn quantize(&self, z_e: &[f64]) -> Result<(usize, Vec<f64>)> {
        if z_e.len() != self.config.code_dim {
            return Err(Error::input(format!("code has dimension {}, expected {}", z_e.len(), self.config.code_dim)));
        }
        let k = nearest_row(&self.embeddings, ArrayView1::from(z_e));
        Ok((k, self.embeddings.row(k).to_vec()))
    }

    pub fn encode(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dim(inputs.ncols(), "input")?;
        Ok(self.encoder.forward(&self.scaler.normalize(&inputs.view()).view()))
    }

    /// Code assigned to each input row.
    pub fn assign(&self, inputs: &Array2<f64>) -> Result<Vec<usize>> {
        let z = self.encode(inputs)?;
        Ok(z.rows().into_iter().map(|r| nearest_row(&self.embeddings, r)).collect())
    }

    /// Autoencoder output (decoder mean at the assigned code) per input row.
    pub fn reconstruct(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        let codes = self.assign(inputs)?;
        Ok(Array2::from_shape_fn((inputs.nrows(), self.input_dim()), |(i, j)| self.centroids[[codes[i], j]]))
    }

    pub fn centroid(&self, k: usize) -> Result<Vec<f64>> {
        self.check_code(k)?;
        Ok(self.centroids.row(k).to_vec())
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    fn check_code(&self, k: usize) -> Result<()> {
        if k >= self.config.num_codes {
            return Err(Error::input(format!("code {k} out of range for {} codes", self.config.num_codes)));
        }
        Ok(())
    }

    /// Unit-variance Gaussian log-density of `x` under code `k`.
    pub fn log_likelihood(&self, x: &[f64], k: usize) -> Result<f64> {
        self.check_code(k)?;
        self.check_dim(x.len(), "input")?;
        let sq: f64 = x.iter().zip(self.centroids.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(-0.5 * sq - HALF_LN_2PI * x.len() as f64)
    }

    /// Loss and gradients for a batch without touching any parameter.
    pub fn gradients(&self, inputs: &Array2<f64>, terms: LossTerms) -> Result<(VqLossReport, VqGrads)> {
        self.check_dim(inputs.ncols(), "input")?;
        if inputs.nrows() == 0 {
            return Err(Error::input("training batch is empty"));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("training batch contains non-finite values"));
        }
        let n = inputs.nrows();
        let nf = n as f64;
        let d = self.input_dim();
        let xn = self.scaler.normalize(&inputs.view());
        let enc = self.encoder.forward_cached(&xn.view());
        let z_e = enc.output();
        let codes: Vec<usize> = z_e.rows().into_iter().map(|r| nearest_row(&self.embeddings, r)).collect();
        let e_q = self.embeddings.select(Axis(0), &codes);

        // Straight-through: the decoder sees e_q, its input gradient is sent to z_e.
        let dec = self.decoder.forward_cached(&e_q.view());
        let mut mu = dec.output().clone();
        self.scaler.denormalize_inplace(&mut mu);
        let mut recon = 0.0;
        let mut grad_mu_n = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                let diff = mu[[i, j]] - inputs[[i, j]];
                recon += 0.5 * diff * diff / nf;
                grad_mu_n[[i, j]] = diff * self.scaler.half_range[j] / nf;
            }
        }
        recon += HALF_LN_2PI * d as f64;
        let (mut dec_grads, grad_e_q) = self.decoder.backward(&dec, grad_mu_n);
        if !terms.reconstruction {
            dec_grads.scale(0.0);
        }

        let diff = z_e - &e_q;
        let sq = diff.mapv(|v| v * v).sum() / nf;
        let mut grad_codebook = Array2::zeros(self.embeddings.raw_dim());
        if terms.codebook {
            for (i, &k) in codes.iter().enumerate() {
                for c in 0..self.config.code_dim {
                    grad_codebook[[k, c]] -= 2.0 * diff[[i, c]] / nf;
                }
            }
        }
        let mut grad_z_e = Array2::zeros(z_e.raw_dim());
        if terms.reconstruction {
            grad_z_e += &grad_e_q;
        }
        if terms.commitment {
            grad_z_e.scaled_add(2.0 * self.config.beta_commit / nf, &diff);
        }
        let (enc_grads, _) = self.encoder.backward(&enc, grad_z_e.clone());
        let report = VqLossReport {
            reconstruction: recon,
            codebook: sq,
            commitment: sq,
            total: recon + sq + self.config.beta_commit * sq,
        };
        Ok((
            report,
            VqGrads {
                encoder: enc_grads,
                codebook: grad_codebook,
                decoder: dec_grads,
                encoder_output: grad_z_e,
                decoder_input: grad_e_q,
                codes,
            },
        ))
    }

    /// Seeds the embeddings with k-means++ over the encodings of `inputs`.
    pub fn initialize(&mut self, inputs: &Array2<f64>) -> Result<()> {
        if inputs.nrows() == 0 {
            return Err(Error::input("cannot initialize from an empty batch"));
        }
        let z = self.encode(inputs)?;
        self.embeddings = kmeans_pp(&z, self.config.num_codes, &mut self.rng);
        self.initialized = true;
        self.refresh_centroids();
        self.version += 1;
        Ok(())
    }

    /// One Adam step on the full objective.
    pub fn train_step(&mut self, inputs: &Array2<f64>) -> Result<VqLossReport> {
        self.train_step_with(inputs, LossTerms::ALL, Frozen::default())
    }

    /// One step with selected loss terms and frozen sub-networks. The first
    /// step seeds the embeddings with k-means++ over the batch's encodings.
    pub fn train_step_with(&mut self, inputs: &Array2<f64>, terms: LossTerms, frozen: Frozen) -> Result<VqLossReport> {
        if !self.initialized && !frozen.codebook {
            self.initialize(inputs)?;
        }
        self.initialized = true;
        let (report, grads) = self.gradients(inputs, terms)?;
        for &k in &grads.codes {
            self.usage[k] += 1;
        }
        if !frozen.encoder {
            self.encoder_opt.step(self.encoder.param_slices_mut(), grads.encoder.slices());
        }
        if !frozen.decoder {
            self.decoder_opt.step(self.decoder.param_slices_mut(), grads.decoder.slices());
        }
        if !frozen.codebook {
            let emb = self.embeddings.as_slice_mut().expect("embeddings are contiguous");
            self.embedding_opt.step(vec![emb], vec![grads.codebook.as_slice().expect("contiguous")]);
        }
        self.refresh_centroids();
        self.version += 1;
        Ok(report)
    }

    /// `steps` minibatch updates over shuffled passes through `inputs`
    /// (rows). After each pass, codes the pass never selected are moved onto
    /// the encoding of a random input.
    pub fn fit<R: Rng + ?Sized>(&mut self, inputs: &Array2<f64>, steps: usize, rng: &mut R) -> Result<VqLossReport> {
        self.check_dim(inputs.ncols(), "input")?;
        let n = inputs.nrows();
        if n == 0 {
            return Err(Error::state("nothing to fit: no inputs"));
        }
        let bs = self.config.batch_size.min(n);
        let mut last = VqLossReport::default();
        let mut done = 0;
        while done < steps {
            self.reset_usage();
            let order = sample(rng, n, n).into_vec();
            for chunk in order.chunks(bs).take(steps - done) {
                let batch = inputs.select(Axis(0), chunk);
                last = self.train_step(&batch)?;
                done += 1;
            }
            self.revive_dead_codes(inputs, rng)?;
        }
        Ok(last)
    }

    /// Moves every code with zero usage onto the encoding of a random input.
    /// Returns the number of revived codes.
    pub fn revive_dead_codes<R: Rng + ?Sized>(&mut self, inputs: &Array2<f64>, rng: &mut R) -> Result<usize> {
        let dead: Vec<usize> = (0..self.config.num_codes).filter(|&k| self.usage[k] == 0).collect();
        if dead.is_empty() || inputs.nrows() == 0 {
            return Ok(0);
        }
        let picks: Vec<usize> = dead.iter().map(|_| rng.random_range(0..inputs.nrows())).collect();
        let z = self.encode(&inputs.select(Axis(0), &picks))?;
        for (row, &k) in dead.iter().enumerate() {
            self.embeddings.row_mut(k).assign(&z.row(row));
        }
        self.refresh_centroids();
        self.version += 1;
        Ok(dead.len())
    }

    /// Maps a state into this codebook's input space.
    pub fn input_for(&self, state: &EnvState, model: Option<&RewardModel>) -> Result<Vec<f64>> {
        Ok(self.inputs_for(std::slice::from_ref(state), model)?.row(0).to_vec())
    }

    /// Row-wise [`input_for`](Self::input_for).
    pub fn inputs_for(&self, states: &[EnvState], model: Option<&RewardModel>) -> Result<Array2<f64>> {
        match self.input_space {
            InputSpace::RawState => {
                self.check_dim(crate::envs::STATE_DIM, "state")?;
                Ok(Array2::from_shape_fn((states.len(), crate::envs::STATE_DIM), |(i, j)| states[i].0[j]))
            }
            InputSpace::PreferredLatent => {
                let model = model.ok_or_else(|| Error::config("latent codebook needs the reward model"))?;
                if let Some(v) = self.reward_model_version {
                    if v != model.version() {
                        return Err(Error::state(format!(
                            "codebook was fit on reward model version {v}, model is at {}",
                            model.version()
                        )));
                    }
                }
                self.check_dim(model.latent_dim(), "latent")?;
                Ok(model.latent_batch(states))
            }
        }
    }

    /// Discovery on a preferred region: fits the codebook to the region's
    /// members, mapped through the reward model in latent mode.
    pub fn fit_discovery<R: Rng + ?Sized>(
        &mut self,
        region: &RegionEstimate,
        model: Option<&RewardModel>,
        steps: usize,
        rng: &mut R,
    ) -> Result<VqLossReport> {
        if region.members().is_empty() {
            return Err(Error::state("preferred region has no members"));
        }
        if self.input_space == InputSpace::PreferredLatent {
            let m = model.ok_or_else(|| Error::config("latent codebook needs the reward model"))?;
            self.reward_model_version = Some(m.version());
        }
        let inputs = self.inputs_for(region.members(), model)?;
        self.fit(&inputs, steps, rng)
    }
}

fn nearest_row(rows: &Array2<f64>, z: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, e) in rows.rows().into_iter().enumerate() {
        let d: f64 = e.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// k-means++ seeding of `k` centers from the rows of `z`.
fn kmeans_pp<R: Rng + ?Sized>(z: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = z.nrows();
    let dim = z.ncols();
    let mut centers = Array2::zeros((k, dim));
    centers.row_mut(0).assign(&z.row(rng.random_range(0..n)));
    let mut dist: Array1<f64> =
        z.rows().into_iter().map(|r| r.iter().zip(centers.row(0)).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    for c in 1..k {
        let total = dist.sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&z.row(pick));
        for (i, r) in z.rows().into_iter().enumerate() {
            let d: f64 = r.iter().zip(centers.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
            dist[i] = dist[i].min(d);
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn small(seed: u64) -> SkillCodebook {
        let cfg = VqConfig { num_codes: 3, code_dim: 2, hidden: vec![16], ..VqConfig::default() };
        SkillCodebook::new(cfg, InputSpace::RawState, InputScaler::identity(2), seed).unwrap()
    }

    fn batch(seed: u64, n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn quantize_examples() {
        let mut cb = small(0);
        cb.embeddings = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 1.0, 1.0, 5.0, 5.0]).unwrap();
        assert_eq!(cb.quantize(&[0.9, 0.8]).unwrap().0, 1);
        assert_eq!(cb.quantize(&[0.5, 0.5]).unwrap().0, 0);
        assert_eq!(cb.quantize(&[0.0, 0.0]).unwrap(), (0, vec![0.0, 0.0]));
        assert!(matches!(cb.quantize(&[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn loss_parts_sum_to_total() {
        let mut cb = small(1);
        let r = cb.train_step(&batch(2, 16)).unwrap();
        assert_eq!(r.total, r.reconstruction + r.codebook + cb.config.beta_commit * r.commitment);
    }

    #[test]
    fn straight_through_copies_the_decoder_input_gradient() {
        let cb = small(3);
        let only_recon = LossTerms { reconstruction: true, codebook: false, commitment: false };
        let (_, g) = cb.gradients(&batch(4, 8), only_recon).unwrap();
        assert_eq!(g.encoder_output, g.decoder_input);
    }

    #[test]
    fn commitment_with_frozen_encoder_changes_nothing() {
        let mut cb = small(5);
        cb.initialize(&batch(6, 16)).unwrap();
        let before = cb.clone();
        let only_commit = LossTerms { reconstruction: false, codebook: false, commitment: true };
        let frozen = Frozen { encoder: true, ..Frozen::default() };
        cb.train_step_with(&batch(7, 16), only_commit, frozen).unwrap();
        assert_eq!(cb.encoder.to_flat(), before.encoder.to_flat());
        assert_eq!(cb.decoder.to_flat(), before.decoder.to_flat());
        assert_eq!(cb.embeddings, before.embeddings);
    }

    #[test]
    fn codebook_term_only_reaches_embeddings() {
        let cb = small(8);
        let only_codebook = LossTerms { reconstruction: false, codebook: true, commitment: false };
        let (_, g) = cb.gradients(&batch(9, 16), only_codebook).unwrap();
        assert!(g.encoder.is_zero() && g.decoder.is_zero());
        assert!(g.codebook.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn log_likelihood_examples() {
        let cb = small(10);
        let c = cb.centroid(1).unwrap();
        let at = cb.log_likelihood(&c, 1).unwrap();
        assert!((at + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let away = cb.log_likelihood(&[c[0] + 1.0, c[1]], 1).unwrap();
        assert!((away - (at - 0.5)).abs() < 1e-12);
        assert!(matches!(cb.centroid(3), Err(Error::Input(_))));
        assert!(cb.centroids().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn recovers_three_clusters() {
        let means = [[-0.7, -0.6], [0.8, -0.5], [0.0, 0.75]];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let n = 300;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let data = Array2::from_shape_fn((n, 2), |(i, j)| means[labels[i]][j] + noise.sample(&mut rng));
        let cfg = VqConfig { num_codes: 3, ..VqConfig::default() };
        let mut cb = SkillCodebook::new(cfg, InputSpace::RawState, InputScaler::identity(2), 12).unwrap();
        for _ in 0..500 {
            let idx: Vec<usize> = (0..64).map(|_| rng.random_range(0..n)).collect();
            cb.train_step(&data.select(Axis(0), &idx)).unwrap();
        }
        let codes = cb.assign(&data).unwrap();
        let mut map = [usize::MAX; 3];
        for (c, l) in codes.iter().zip(&labels) {
            if map[*l] == usize::MAX {
                map[*l] = *c;
            }
            assert_eq!(map[*l], *c, "cluster {l} split across codes");
        }
        assert!(map[0] != map[1] && map[1] != map[2] && map[0] != map[2]);
        let recon = cb.reconstruct(&data).unwrap();
        let mse = (&recon - &data).mapv(|v| v * v).mean().unwrap();
        assert!(mse < 0.05, "mse {mse}");
        for (l, m) in means.iter().enumerate() {
            let c = cb.centroid(map[l]).unwrap();
            assert!(((c[0] - m[0]).powi(2) + (c[1] - m[1]).powi(2)).sqrt() < 0.1);
        }
    }
}
