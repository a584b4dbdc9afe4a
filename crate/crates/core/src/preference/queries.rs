use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{PreferencePair, Segment};
use super::model::RewardModel;
use crate::error::{Error, Result};
use crate::rl::ReplayBuffer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    #[default]
    Uniform,
    /// Rank a larger uniform pool by ensemble variance and keep the top.
    Disagreement,
}

/// Candidate pool size for disagreement ranking, as a multiple of `k`.
pub const DISAGREEMENT_POOL_FACTOR: usize = 10;

/// Every full aligned segment of length `len` currently in the buffer.
pub fn collect_segments(buffer: &ReplayBuffer, len: usize) -> Result<Vec<Segment>> {
    buffer
        .segments(len)
        .into_iter()
        .map(|r| {
            Ok(Segment { episode: r.episode, offset: r.offset, states: buffer.segment_states(r, len)? })
        })
        .collect()
}

/// `k` distinct unordered index pairs `(i, j)`, `i != j`, drawn uniformly
/// without replacement from `0..m`.
pub fn distinct_pairs<R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let total = m * m.saturating_sub(1) / 2;
    if k > total {
        return Err(Error::input(format!("{k} distinct pairs requested but only {total} exist")));
    }
    if total <= 4 * k {
        // Dense request: sample pair ranks directly.
        let ranks = sample(rng, total, k);
        return Ok(ranks.into_iter().map(|r| unrank(r, m)).collect());
    }
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.random_range(0..m);
        let j = rng.random_range(0..m);
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if seen.insert(key) {
            out.push((i, j));
        }
    }
    Ok(out)
}

/// Maps a rank in `0..m(m-1)/2` to the pair `(i, j)` with `i < j`.
fn unrank(mut r: usize, m: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = m - 1 - i;
        if r < row {
            return (i, i + 1 + r);
        }
        r -= row;
        i += 1;
    }
}

/// Draws `k` unlabelled query pairs of length-`len` segments from the buffer.
pub fn sample_queries<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    len: usize,
    k: usize,
    strategy: QueryStrategy,
    model: &RewardModel,
    rng: &mut R,
) -> Result<Vec<PreferencePair>> {
    let segments = collect_segments(buffer, len)?;
    select_queries(&segments, k, strategy, model, rng)
}

/// Query selection over an explicit segment pool.
pub fn select_queries<R: Rng + ?Sized>(
    segments: &[Segment],
    k: usize,
    strategy: QueryStrategy,
    model: &RewardModel,
    rng: &mut R,
) -> Result<Vec<PreferencePair>> {
    if segments.len() < 2 {
        return Err(Error::state(format!("need at least 2 full segments, buffer has {}", segments.len())));
    }
    let total = segments.len() * (segments.len() - 1) / 2;
    let k = k.min(total);
    let make = |(i, j): (usize, usize)| PreferencePair { first: segments[i].clone(), second: segments[j].clone() };
    if strategy == QueryStrategy::Uniform || model.ensemble_size() == 1 {
        return Ok(distinct_pairs(segments.len(), k, rng)?.into_iter().map(make).collect());
    }
    let pool_size = (k * DISAGREEMENT_POOL_FACTOR).min(total);
    let pool: Vec<PreferencePair> = distinct_pairs(segments.len(), pool_size, rng)?.into_iter().map(make).collect();
    let mut scored = pool
        .into_iter()
        .map(|p| Ok((model.preference_variance(&p)?, p)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().take(k).map(|(_, p)| p).collect())
}
