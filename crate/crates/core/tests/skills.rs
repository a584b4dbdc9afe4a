use cdp_core::envs::{EnvConfig, EnvState, Environment};
use cdp_core::nn::InputScaler;
use cdp_core::rl::SacConfig;
use cdp_core::skills::{evaluate_skills, skill_reward, skill_rewards, train_skills, SkillSet};
use cdp_core::vqvae::{InputSpace, SkillCodebook, VqConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn codebook(seed: u64) -> SkillCodebook {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_fn((200, 2), |_| rng.random_range(-1.0..1.0));
    let cfg = VqConfig { num_codes: 4, hidden: vec![16], ..VqConfig::default() };
    let mut cb = SkillCodebook::new(cfg, InputSpace::RawState, InputScaler::identity(2), seed).unwrap();
    cb.initialize(&data).unwrap();
    for _ in 0..50 {
        cb.train_step(&data).unwrap();
    }
    cb
}

#[test]
fn the_best_skill_for_a_state_is_its_nearest_centroid() {
    let cb = codebook(2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let s = EnvState::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rewards: Vec<f64> = (0..4).map(|z| skill_reward(&cb, None, &s, z).unwrap()).collect();
        let best = (0..4).max_by(|&a, &b| rewards[a].total_cmp(&rewards[b])).unwrap();
        let dist = |z: usize| {
            let c = cb.centroid(z).unwrap();
            (s.0[0] - c[0]).powi(2) + (s.0[1] - c[1]).powi(2)
        };
        let nearest = (0..4).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        assert_eq!(best, nearest);
        let batched = skill_rewards(&cb, None, &[s; 4], &[0, 1, 2, 3]).unwrap();
        assert_eq!(batched, rewards);
    }
    assert!(skill_reward(&cb, None, &EnvState::new(0.0, 0.0), 4).is_err());
}

#[test]
fn saved_skills_evaluate_identically() {
    let env = Environment::new(EnvConfig::room_nav_2d()).unwrap();
    let sac = SacConfig { hidden: vec![16, 16], batch_size: 16, learning_starts: 50, ..SacConfig::default() };
    let skills = train_skills(codebook(3), None, env.clone(), sac, 300, 11).unwrap();
    assert!(skills.training_steps >= 300);

    let report = evaluate_skills(&skills, &env, 2).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.trajectories.len(), 8);
    assert!(report.mean_centroid_to_goal.is_some());
    assert!(report.velocity_variance.is_none(), "room navigation has no velocity");

    let mut bytes = Vec::new();
    ciborium::into_writer(&skills, &mut bytes).unwrap();
    let reloaded: SkillSet = ciborium::from_reader(bytes.as_slice()).unwrap();
    assert_eq!(evaluate_skills(&reloaded, &env, 2).unwrap(), report);
}
