use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvState;
use crate::error::{Error, Result};

/// One environment step. Rewards are deliberately absent: they are computed
/// from the current reward components whenever a batch is sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EnvState,
    pub action: Vec<f64>,
    pub next_state: EnvState,
    pub skill: usize,
    pub done: bool,
    pub episode: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EpisodeSpan {
    id: u64,
    /// Absolute index of the first retained transition.
    start: u64,
    /// One past the last retained transition.
    end: u64,
    /// Step number (within the episode) of the first retained transition.
    first_step: usize,
}

/// A window of `len` consecutive states inside one stored episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentRef {
    pub episode: u64,
    pub offset: usize,
}

/// Bounded FIFO of transitions with a per-episode index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Transition>,
    head: u64,
    episodes: VecDeque<EpisodeSpan>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay buffer capacity must be positive"));
        }
        Ok(Self { capacity, entries: VecDeque::new(), head: 0, episodes: VecDeque::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a transition, evicting the oldest entry when full.
    ///
    /// Transitions of one episode must be pushed contiguously.
    pub fn push(&mut self, transition: Transition) -> Result<()> {
        let abs = self.head + self.entries.len() as u64;
        match self.episodes.back_mut() {
            Some(span) if span.id == transition.episode => span.end = abs + 1,
            _ => {
                if self.episodes.iter().any(|s| s.id == transition.episode) {
                    return Err(Error::input(format!(
                        "episode {} was already closed; episode ranges must be contiguous",
                        transition.episode
                    )));
                }
                self.episodes.push_back(EpisodeSpan {
                    id: transition.episode,
                    start: abs,
                    end: abs + 1,
                    first_step: 0,
                });
            }
        }
        self.entries.push_back(transition);
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
            self.head += 1;
            let front = self.episodes.front_mut().expect("evicted entry belongs to an episode");
            front.start += 1;
            front.first_step += 1;
            if front.start == front.end {
                self.episodes.pop_front();
            }
        }
        Ok(())
    }

    /// Uniform sampling with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if self.entries.is_empty() {
            return Err(Error::state("cannot sample from an empty replay buffer"));
        }
        if k > self.entries.len() {
            return Err(Error::input(format!(
                "sample size {k} exceeds buffer length {}",
                self.entries.len()
            )));
        }
        Ok((0..k).map(|_| &self.entries[rng.random_range(0..self.entries.len())]).collect())
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.entries.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    pub fn episode_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.episodes.iter().map(|s| s.id)
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    fn span(&self, id: u64) -> Option<&EpisodeSpan> {
        self.episodes.iter().rev().find(|s| s.id == id)
    }

    /// Retained transitions of an episode, oldest first.
    pub fn episode(&self, id: u64) -> Option<impl Iterator<Item = &Transition>> {
        let span = self.span(id)?;
        let lo = (span.start - self.head) as usize;
        let hi = (span.end - self.head) as usize;
        Some(self.entries.range(lo..hi))
    }

    /// Visited states (`next_state` of each step) of an episode.
    pub fn episode_states(&self, id: u64) -> Option<Vec<EnvState>> {
        Some(self.episode(id)?.map(|t| t.next_state).collect())
    }

    /// Non-overlapping windows of `len` visited states, aligned to multiples
    /// of `len` within each episode; only full windows are returned.
    pub fn segments(&self, len: usize) -> Vec<SegmentRef> {
        if len == 0 {
            return Vec::new();
        }
        let mut out = Vec::new();
        for span in &self.episodes {
            let retained = (span.end - span.start) as usize;
            let last = span.first_step + retained;
            let mut offset = span.first_step.div_ceil(len) * len;
            while offset + len <= last {
                out.push(SegmentRef { episode: span.id, offset });
                offset += len;
            }
        }
        out
    }

    pub fn segment_states(&self, seg: SegmentRef, len: usize) -> Result<Vec<EnvState>> {
        let span = self
            .span(seg.episode)
            .ok_or_else(|| Error::state(format!("episode {} is not in the buffer", seg.episode)))?;
        let retained = (span.end - span.start) as usize;
        if seg.offset < span.first_step || seg.offset + len > span.first_step + retained {
            return Err(Error::state(format!(
                "segment at offset {} of episode {} is no longer fully retained",
                seg.offset, seg.episode
            )));
        }
        let lo = (span.start - self.head) as usize + (seg.offset - span.first_step);
        Ok(self.entries.range(lo..lo + len).map(|t| t.next_state).collect())
    }

    /// Visited states of the most recent `n` transitions, oldest first.
    pub fn recent_states(&self, n: usize) -> Vec<EnvState> {
        let skip = self.entries.len().saturating_sub(n);
        self.entries.iter().skip(skip).map(|t| t.next_state).collect()
    }
}
