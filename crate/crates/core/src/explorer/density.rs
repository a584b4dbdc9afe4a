use serde::{Deserialize, Serialize};

use crate::envs::{EnvState, StateBox, STATE_DIM};
use crate::error::{Error, Result};

/// Laplace-smoothed histogram density over a state box, `bins` cells per
/// dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    bounds: StateBox,
    bins: usize,
    alpha: f64,
    counts: Vec<u64>,
    total: u64,
}

impl DensityModel {
    pub fn new(bounds: StateBox, bins: usize, alpha: f64) -> Result<Self> {
        if bins == 0 || !(alpha > 0.0) {
            return Err(Error::config("density needs at least one bin and a positive smoothing constant"));
        }
        if bounds.low.iter().zip(&bounds.high).any(|(l, h)| !(h > l)) {
            return Err(Error::config("density box must have positive extent"));
        }
        Ok(Self { bounds, bins, alpha, counts: vec![0; bins.pow(STATE_DIM as u32)], total: 0 })
    }

    pub fn num_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn cell_volume(&self) -> f64 {
        self.bounds.volume() / self.counts.len() as f64
    }

    /// Flat index of the cell holding `state`.
    pub fn cell(&self, state: &EnvState) -> Result<usize> {
        if !self.bounds.contains(state) || state.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("state {:?} lies outside the density box", state.0)));
        }
        let mut idx = 0;
        for d in 0..STATE_DIM {
            let span = self.bounds.high[d] - self.bounds.low[d];
            let b = (((state.0[d] - self.bounds.low[d]) / span) * self.bins as f64).floor() as usize;
            idx = idx * self.bins + b.min(self.bins - 1);
        }
        Ok(idx)
    }

    pub fn observe(&mut self, state: &EnvState) -> Result<()> {
        let c = self.cell(state)?;
        self.counts[c] += 1;
        self.total += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.total = 0;
    }

    /// Smoothed probability mass of cell `c`.
    pub fn cell_prob(&self, c: usize) -> f64 {
        (self.counts[c] as f64 + self.alpha) / (self.total as f64 + self.alpha * self.counts.len() as f64)
    }

    pub fn log_prob(&self, state: &EnvState) -> Result<f64> {
        let c = self.cell(state)?;
        Ok((self.cell_prob(c) / self.cell_volume()).ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room() -> StateBox {
        StateBox { low: [-1.0, -1.0], high: [1.0, 1.0] }
    }

    #[test]
    fn fresh_model_is_uniform() {
        let d = DensityModel::new(room(), 20, 1.0).unwrap();
        let expected = (1.0f64 / 4.0).ln();
        for s in [EnvState::new(0.0, 0.0), EnvState::new(-1.0, 1.0), EnvState::new(0.37, -0.91)] {
            assert!((d.log_prob(&s).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn visits_raise_density_and_mass_stays_normalized() {
        let mut d = DensityModel::new(room(), 20, 1.0).unwrap();
        let hot = EnvState::new(0.5, 0.5);
        for _ in 0..100 {
            d.observe(&hot).unwrap();
        }
        let cold = EnvState::new(-0.5, -0.5);
        assert!(d.log_prob(&hot).unwrap() > d.log_prob(&cold).unwrap());
        let mass: f64 = (0..d.num_cells()).map(|c| d.cell_prob(c)).sum();
        assert!((mass - 1.0).abs() < 1e-6);
        let integral: f64 = (0..d.num_cells()).map(|c| d.cell_prob(c) / d.cell_volume() * d.cell_volume()).sum();
        assert!((integral - 1.0).abs() < 1e-6);
    }

    #[test]
    fn outside_the_box_is_an_input_error() {
        let d = DensityModel::new(room(), 4, 1.0).unwrap();
        assert!(matches!(d.log_prob(&EnvState::new(1.5, 0.0)), Err(Error::Input(_))));
    }

    #[test]
    fn revisiting_never_increases_the_novelty_bonus() {
        let mut d = DensityModel::new(room(), 10, 1.0).unwrap();
        let s = EnvState::new(0.1, 0.2);
        let mut last = -d.log_prob(&s).unwrap();
        for _ in 0..20 {
            d.observe(&s).unwrap();
            let now = -d.log_prob(&s).unwrap();
            assert!(now <= last);
            last = now;
        }
    }
}
