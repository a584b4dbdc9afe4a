use cdp_core::envs::EnvState;
use cdp_core::nn::InputScaler;
use cdp_core::preference::{
    distinct_pairs, Label, Labeler, PreferenceDataset, PreferencePair, PreferenceRecord, RewardModel, RewardModelConfig,
    Segment,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn segment(points: &[(f64, f64)], episode: u64) -> Segment {
    Segment { episode, offset: 0, states: points.iter().map(|&(x, y)| EnvState::new(x, y)).collect() }
}

fn points(len: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swapping_a_pair_complements_the_preference(a in points(8), b in points(8), seed in 0u64..50) {
        let model = RewardModel::new(RewardModelConfig::default(), InputScaler::identity(2), seed).unwrap();
        let pair = PreferencePair { first: segment(&a, 0), second: segment(&b, 1) };
        let p = model.predict_preference(&pair).unwrap();
        let q = model.predict_preference(&pair.swapped()).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p + q - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_segments_are_a_coin_flip(a in points(6), seed in 0u64..50) {
        let model = RewardModel::new(RewardModelConfig::default(), InputScaler::identity(2), seed).unwrap();
        let pair = PreferencePair { first: segment(&a, 0), second: segment(&a, 1) };
        prop_assert!((model.predict_preference(&pair).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distinct_pairs_are_distinct_and_in_range(m in 2usize..40, k in 1usize..60, seed: u64) {
        let k = k.min(m * (m - 1) / 2);
        let pairs = distinct_pairs(m, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(pairs.len(), k);
        let mut keys: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        prop_assert!(pairs.iter().all(|&(i, j)| i != j && i < m && j < m));
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys.len(), k);
    }
}

#[test]
fn dataset_survives_reopening_with_the_same_split() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.jsonl");
    let mut ds = PreferenceDataset::open(&path, 0.25).unwrap();
    let labels = [Label::First, Label::Second, Label::Skip];
    for i in 0..40u64 {
        let pair = PreferencePair {
            first: segment(&[(0.01 * i as f64, 0.0), (0.5, 0.5)], i),
            second: segment(&[(-0.3, 0.2), (0.1, -0.01 * i as f64)], i + 100),
        };
        ds.push(PreferenceRecord::new(format!("r{i}"), pair, labels[i as usize % 3], Labeler::Oracle)).unwrap();
    }
    let again = PreferenceDataset::open(&path, 0.25).unwrap();
    assert_eq!(again.records(), ds.records());
    let ids = |d: &PreferenceDataset| {
        let (train, holdout) = d.split();
        let f = |v: Vec<&PreferenceRecord>| v.into_iter().map(|r| r.pair_id.clone()).collect::<Vec<_>>();
        (f(train), f(holdout))
    };
    assert_eq!(ids(&again), ids(&ds));
    let (train, holdout) = ids(&ds);
    assert!(!holdout.is_empty() && !train.is_empty());
    assert_eq!(train.len() + holdout.len(), 27, "skipped pairs are in neither part");
    assert_eq!(holdout.len(), 6);
}
