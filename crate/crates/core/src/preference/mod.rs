//! Pairwise preference feedback and the reward model learned from it.
//!
//! Segments of visited states are paired, labelled by a person or by an
//! oracle, and stored in an append-only dataset. A Bradley-Terry model on
//! summed per-state rewards turns labels into a training signal; the reward
//! network's last hidden layer doubles as a learned feature space.

mod dataset;
mod model;
mod queries;

pub use dataset::{
    oracle_label, Label, Labeler, PreferenceDataset, PreferencePair, PreferenceRecord, Segment, TIE_EPSILON,
};
pub use model::{preference_from_sums, RewardGrads, RewardModel, RewardModelConfig, TrainingReport};
pub use queries::{collect_segments, distinct_pairs, sample_queries, select_queries, QueryStrategy, DISAGREEMENT_POOL_FACTOR};
