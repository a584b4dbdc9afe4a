//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion ids to run a
//! subset, e.g. `cargo test -p cdp-harness --test acceptance -- P1 P3`.
//! Set `CDP_ACCEPTANCE_RUNS` to keep the run directories (and reuse them on
//! the next invocation); otherwise they live in a temporary directory.
//!
//! Exit status is non-zero when a criterion fails that is not listed in
//! `KNOWN_FAILURES`.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cdp_core::envs::{EnvAction, EnvConfig, EnvState, Environment};
use cdp_core::explorer::ExplorationMode;
use cdp_core::nn::InputScaler;
use cdp_core::preference::{
    distinct_pairs, oracle_label, Label, Labeler, PreferenceDataset, PreferencePair, PreferenceRecord, RewardModel,
    RewardModelConfig, Segment,
};
use cdp_core::region::RegionEstimate;
use cdp_core::rl::SacConfig;
use cdp_core::vqvae::{Frozen, InputSpace, LossTerms, SkillCodebook, VqConfig};
use cdp_harness::artifacts::Stage;
use cdp_harness::pipeline::{run_through, RunOutcome, BACKWARD_VELOCITY, NEAR_CENTROID};
use cdp_harness::{resume, RunConfig};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Criteria expected to fail, with the reason kept in the project notes.
const KNOWN_FAILURES: &[&str] = &["P2", "P8"];

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

/// Pipeline runs shared between criteria, keyed by run id.
struct Runs {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    cache: HashMap<String, RunOutcome>,
}

impl Runs {
    fn new() -> Self {
        match std::env::var_os("CDP_ACCEPTANCE_RUNS") {
            Some(dir) => Self { root: PathBuf::from(dir), _tmp: None, cache: HashMap::new() },
            None => {
                let tmp = tempfile::tempdir().expect("temp dir");
                Self { root: tmp.path().to_path_buf(), _tmp: Some(tmp), cache: HashMap::new() }
            }
        }
    }

    /// Runs (or resumes) `cfg` through `last`.
    fn get(&mut self, cfg: &RunConfig, last: Stage) -> &RunOutcome {
        let done = self.cache.get(&cfg.run_id).is_some_and(|o| o.manifest.is_complete(last));
        if !done {
            let t = Instant::now();
            let out = run_through(cfg, &self.root, last).unwrap_or_else(|e| panic!("run {} failed: {e}", cfg.run_id));
            eprintln!("    run {} through {last}: {:.0}s", cfg.run_id, t.elapsed().as_secs_f64());
            self.cache.insert(cfg.run_id.clone(), out);
        }
        &self.cache[&cfg.run_id]
    }
}

fn room_run(mode: ExplorationMode, seed: u64, beta: f64) -> RunConfig {
    let mut cfg = RunConfig {
        run_id: format!("room-{mode}-s{seed}-b{beta}"),
        seed,
        env: EnvConfig::room_nav_2d(),
        plots: false,
        ..RunConfig::default()
    };
    cfg.exploration.mode = mode;
    cfg.exploration.epochs = 40;
    cfg.exploration.beta_region = beta;
    cfg.discovery.steps = 2000;
    cfg.skills.steps = 10_000;
    cfg.skills.eval_every = 0;
    cfg
}

fn walker_run(space: InputSpace, seed: u64) -> RunConfig {
    let tag = match space {
        InputSpace::RawState => "raw",
        InputSpace::PreferredLatent => "latent",
    };
    let mut cfg = RunConfig {
        run_id: format!("walker-{tag}-s{seed}"),
        seed,
        env: EnvConfig::line_walker(),
        plots: false,
        ..RunConfig::default()
    };
    cfg.exploration.epochs = 20;
    cfg.exploration.episodes_per_epoch = 2;
    cfg.exploration.codebook_input = space;
    cfg.exploration.beta_region = 0.5;
    cfg.sac = SacConfig { batch_size: 128, learning_starts: 400, ..SacConfig::default() };
    cfg.discovery.steps = 2000;
    cfg.skills.steps = 10_000;
    cfg.skills.eval_every = 0;
    cfg
}

fn random_segment<R: Rng>(rng: &mut R, len: usize) -> Segment {
    Segment {
        episode: rng.random_range(0..1000),
        offset: 0,
        states: (0..len).map(|_| EnvState::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect(),
    }
}

fn room_scaler(env: &Environment) -> InputScaler {
    let b = env.state_box();
    InputScaler::from_bounds(&b.low, &b.high)
}

fn p1_bradley_terry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_sum = 0.0f64;
    for i in 0..1000 {
        let model = RewardModel::new(RewardModelConfig::default(), InputScaler::identity(2), i / 100).unwrap();
        let pair = PreferencePair { first: random_segment(&mut rng, 25), second: random_segment(&mut rng, 25) };
        let p = model.predict_preference(&pair).unwrap();
        let q = model.predict_preference(&pair.swapped()).unwrap();
        worst_sum = worst_sum.max((p + q - 1.0).abs());
    }

    let mut worst_rel = 0.0f64;
    for seed in 0..20 {
        let cfg = RewardModelConfig { hidden: vec![6], latent_dim: 4, ..RewardModelConfig::default() };
        let mut model = RewardModel::new(cfg, InputScaler::identity(2), 500 + seed).unwrap();
        let pairs: Vec<PreferencePair> =
            (0..3).map(|_| PreferencePair { first: random_segment(&mut rng, 4), second: random_segment(&mut rng, 4) }).collect();
        let batch: Vec<(&PreferencePair, Label)> =
            pairs.iter().map(|p| (p, if rng.random_bool(0.5) { Label::First } else { Label::Second })).collect();
        let analytic = model.reward_loss(&batch).unwrap().1.to_flat();
        let base = model.parameters();
        let h = 1e-5;
        for (i, a) in analytic.iter().enumerate() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            model.set_parameters(&p).unwrap();
            let up = model.reward_loss(&batch).unwrap().0;
            p[i] = base[i] - h;
            model.set_parameters(&p).unwrap();
            let down = model.reward_loss(&batch).unwrap().0;
            let numeric = (up - down) / (2.0 * h);
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            worst_rel = worst_rel.max((a - numeric).abs() / scale);
        }
        model.set_parameters(&base).unwrap();
    }
    verdict(
        worst_sum < 1e-6 && worst_rel < 1e-4,
        format!("max |p + p_swapped - 1| = {worst_sum:.1e} (1000 pairs), max gradient rel. err = {worst_rel:.1e} (20 models)"),
    )
}

/// 400 oracle-labelled pairs of 25-step segments from uniformly random rollouts.
fn random_rollout_dataset(env: &Environment, seed: u64) -> PreferenceDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oracle = env.oracle();
    let mut segments = Vec::new();
    for episode in 0..100u64 {
        let mut s = env.reset();
        let mut states = Vec::with_capacity(env.horizon());
        for _ in 0..env.horizon() {
            let a = EnvAction(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            s = env.step(&s, &a).unwrap();
            states.push(s);
        }
        for (k, chunk) in states.chunks_exact(25).enumerate() {
            segments.push(Segment { episode, offset: k * 25, states: chunk.to_vec() });
        }
    }
    let mut ds = PreferenceDataset::new(0.1).unwrap();
    for (n, (i, j)) in distinct_pairs(segments.len(), 400, &mut rng).unwrap().into_iter().enumerate() {
        let pair = PreferencePair { first: segments[i].clone(), second: segments[j].clone() };
        let label = oracle_label(&pair, &oracle);
        ds.push(PreferenceRecord::new(format!("p{n}"), pair, label, Labeler::Oracle)).unwrap();
    }
    ds
}

fn p2_reward_fidelity() -> Verdict {
    let env = Environment::new(EnvConfig::room_nav_2d()).unwrap();
    let mut accs = Vec::new();
    for seed in SEEDS {
        let ds = random_rollout_dataset(&env, seed);
        let mut model = RewardModel::new(RewardModelConfig::default(), room_scaler(&env), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let report = model.train(&ds, 1000, &mut rng).unwrap();
        accs.push(report.holdout_accuracy.unwrap_or(0.0));
    }
    let shown: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    verdict(accs.iter().all(|a| *a >= 0.90), format!("holdout accuracy per seed [{}] (need >= 0.90 each)", shown.join(", ")))
}

/// Value at rank floor(beta * (n - 1)) of the ascending sort.
fn reference_quantile(rewards: &[f64], beta: f64) -> f64 {
    let mut v = rewards.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((beta * (v.len() - 1) as f64) + 1e-9).floor() as usize;
    v[rank.min(v.len() - 1)]
}

fn p3_region() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = Vec::new();
    for case in 0..200 {
        let n = rng.random_range(1..80);
        // Coarse rewards so that ties are common.
        let rewards: Vec<f64> = (0..n).map(|_| (rng.random_range(-1.0..1.0f64) * 8.0).round() / 8.0).collect();
        let states: Vec<EnvState> = (0..n).map(|i| EnvState::new(i as f64, 0.0)).collect();
        let region = |beta: f64| RegionEstimate::from_rewards(states.clone(), rewards.clone(), beta, 0).unwrap();
        let ids = |r: &RegionEstimate| -> Vec<usize> { r.members().iter().map(|s| s.0[0] as usize).collect() };

        let (b1, b2) = {
            let (a, b) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
            if a <= b { (a, b) } else { (b, a) }
        };
        let (low, high) = (region(b1), region(b2));
        if !ids(&high).iter().all(|i| ids(&low).contains(i)) {
            failures.push(format!("case {case}: beta {b2} region not inside beta {b1} region"));
        }
        for r in [&low, &high] {
            let t = reference_quantile(&rewards, r.beta());
            let expected: Vec<usize> = (0..n).filter(|&i| rewards[i] >= t).collect();
            if r.threshold() != t || ids(r) != expected {
                failures.push(format!("case {case}: beta {} threshold {} vs {t}", r.beta(), r.threshold()));
            }
        }
        if ids(&region(0.0)) != (0..n).collect::<Vec<_>>() {
            failures.push(format!("case {case}: beta 0 dropped candidates"));
        }
        let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let argmax: Vec<usize> = (0..n).filter(|&i| rewards[i] == max).collect();
        if ids(&region(1.0)) != argmax {
            failures.push(format!("case {case}: beta 1 is not the argmax set"));
        }
    }
    let detail = if failures.is_empty() {
        "200 configurations: inclusion, quantile coherence, beta 0 and beta 1 all exact".to_string()
    } else {
        format!("{} violations, first: {}", failures.len(), failures[0])
    };
    verdict(failures.is_empty(), detail)
}

fn p4_vq_mechanics() -> Verdict {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let batch = |rng: &mut ChaCha8Rng, n: usize| Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
    let small = |seed: u64| {
        let cfg = VqConfig { num_codes: 4, code_dim: 3, hidden: vec![8], ..VqConfig::default() };
        SkillCodebook::new(cfg, InputSpace::RawState, InputScaler::identity(2), seed).unwrap()
    };

    // Quantization against a brute-force nearest row.
    let mut cb = small(1);
    cb.initialize(&batch(&mut rng, 32)).unwrap();
    let e = cb.embeddings().clone();
    for _ in 0..1000 {
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let best = (0..e.nrows())
            .min_by(|&a, &b| {
                let d = |k: usize| e.row(k).iter().zip(&z).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                d(a).partial_cmp(&d(b)).unwrap()
            })
            .unwrap();
        let (k, q) = cb.quantize(&z).unwrap();
        if k != best || q != e.row(best).to_vec() {
            problems.push("quantization disagrees with brute force".to_string());
            break;
        }
    }

    // Stop-gradient and straight-through.
    let terms = |r: bool, c: bool, m: bool| LossTerms { reconstruction: r, codebook: c, commitment: m };
    let x = batch(&mut rng, 16);
    let (_, g) = cb.gradients(&x, terms(true, false, false)).unwrap();
    if g.encoder_output != g.decoder_input {
        problems.push("straight-through gradient differs from the decoder-input gradient".into());
    }
    if g.codebook.iter().any(|v| *v != 0.0) {
        problems.push("reconstruction gradient reached the embeddings".into());
    }
    let (_, g) = cb.gradients(&x, terms(false, true, false)).unwrap();
    if !(g.encoder.is_zero() && g.decoder.is_zero()) {
        problems.push("codebook loss reached the networks".into());
    }
    let (_, g) = cb.gradients(&x, terms(false, false, true)).unwrap();
    if !(g.decoder.is_zero() && g.codebook.iter().all(|v| *v == 0.0)) {
        problems.push("commitment loss reached the decoder or embeddings".into());
    }
    let before = (cb.network_parameters(), cb.embeddings().clone());
    cb.train_step_with(&x, terms(false, false, true), Frozen { encoder: true, ..Frozen::default() }).unwrap();
    if (cb.network_parameters(), cb.embeddings().clone()) != before {
        problems.push("frozen-encoder commitment step changed parameters".into());
    }
    let before = (cb.network_parameters(), cb.embeddings().clone());
    cb.train_step_with(&x, terms(true, true, true), Frozen { encoder: true, codebook: true, decoder: true }).unwrap();
    if (cb.network_parameters(), cb.embeddings().clone()) != before {
        problems.push("fully frozen step changed parameters".into());
    }

    // Three well-separated clusters.
    let means = [[-0.7, -0.6], [0.8, -0.5], [0.0, 0.75]];
    let noise = Normal::new(0.0, 0.05).unwrap();
    let n = 300;
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let data = Array2::from_shape_fn((n, 2), |(i, j)| means[labels[i]][j] + noise.sample(&mut rng));
    let mut cb = SkillCodebook::new(
        VqConfig { num_codes: 3, ..VqConfig::default() },
        InputSpace::RawState,
        InputScaler::identity(2),
        12,
    )
    .unwrap();
    for _ in 0..500 {
        let idx: Vec<usize> = (0..64).map(|_| rng.random_range(0..n)).collect();
        cb.train_step(&data.select(Axis(0), &idx)).unwrap();
    }
    let codes = cb.assign(&data).unwrap();
    let mut counts = [[0usize; 3]; 3];
    for (c, l) in codes.iter().zip(&labels) {
        counts[*c][*l] += 1;
    }
    let majority: usize = counts.iter().map(|row| row.iter().max().unwrap()).sum();
    let purity = majority as f64 / n as f64;
    let used = counts.iter().filter(|row| row.iter().sum::<usize>() > 0).count();
    let recon = cb.reconstruct(&data).unwrap();
    let mse = (&recon - &data).mapv(|v| v * v).mean().unwrap();
    if purity != 1.0 || used != 3 || mse >= 0.05 {
        problems.push(format!("clusters: purity {purity}, codes used {used}, mse {mse:.4}"));
    }

    let detail = if problems.is_empty() {
        format!("quantization, stop-gradient, straight-through exact; 3 clusters purity 1.0, mse {mse:.4}")
    } else {
        problems.join("; ")
    };
    verdict(problems.is_empty(), detail)
}

fn p5_guided_returns(runs: &mut Runs) -> Verdict {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let mut tail = |mode| {
            runs.get(&room_run(mode, seed, 0.5), Stage::Exploration).tail_mean("mean_oracle_return", 5).unwrap()
        };
        let cdp = tail(ExplorationMode::CdpGuided);
        let prior = tail(ExplorationMode::SmmPrior);
        let base = tail(ExplorationMode::SmmBaseline);
        let ok = cdp >= 1.2 * base && cdp >= 1.05 * prior;
        wins += ok as usize;
        lines.push(format!("s{seed}: cdp {cdp:.3} / prior {prior:.3} / smm {base:.3}"));
    }
    verdict(wins >= 2, format!("{wins}/3 seeds ({})", lines.join("; ")))
}

fn goal_distance(runs: &mut Runs, cfg: &RunConfig) -> (f64, usize) {
    let report = runs.get(cfg, Stage::Skills).report.clone().expect("skills report");
    (report.mean_centroid_to_goal.expect("room goal"), report.skills_near_centroid(NEAR_CENTROID))
}

fn p6_region_skills(runs: &mut Runs) -> Verdict {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let (cdp, near) = goal_distance(runs, &room_run(ExplorationMode::CdpGuided, seed, 0.5));
        let (edl, _) = goal_distance(runs, &room_run(ExplorationMode::SmmBaseline, seed, 0.5));
        let ok = cdp <= 0.5 * edl && near >= 8;
        wins += ok as usize;
        lines.push(format!("s{seed}: cdp {cdp:.3} vs edl {edl:.3} (ratio {:.2}), near {near}/10", cdp / edl));
    }
    verdict(wins >= 2, format!("{wins}/3 seeds ({})", lines.join("; ")))
}

fn p7_beta_order(runs: &mut Runs) -> Verdict {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let d: Vec<f64> =
            [0.1, 0.5, 0.9].iter().map(|&b| goal_distance(runs, &room_run(ExplorationMode::CdpGuided, seed, b)).0).collect();
        let ok = d[0] > d[1] && d[1] > d[2];
        wins += ok as usize;
        lines.push(format!("s{seed}: {:.3} > {:.3} > {:.3}", d[0], d[1], d[2]));
    }
    verdict(wins >= 2, format!("{wins}/3 seeds strictly decreasing ({})", lines.join("; ")))
}

fn p8_preferred_latent(runs: &mut Runs) -> Verdict {
    let mut backward = |space| {
        let r = runs.get(&walker_run(space, 0), Stage::Skills).report.clone().expect("skills report");
        (r.skills_slower_than(BACKWARD_VELOCITY), r.velocity_variance.unwrap_or(f64::NAN))
    };
    let (raw, raw_var) = backward(InputSpace::RawState);
    let (latent, latent_var) = backward(InputSpace::PreferredLatent);
    verdict(
        raw < 5 && latent >= 8,
        format!(
            "backward skills: raw {raw}/10 (need < 5), latent {latent}/10 (need >= 8); velocity variance raw {raw_var:.4}, latent {latent_var:.4}"
        ),
    )
}

fn p9_determinism(root: &Path) -> Verdict {
    let mut cfg = RunConfig { run_id: "det".into(), seed: 9, plots: false, ..RunConfig::default() };
    cfg.exploration.epochs = 6;
    cfg.exploration.episodes_per_epoch = 2;
    cfg.discovery.steps = 300;
    cfg.skills.steps = 1500;
    cfg.skills.eval_every = 500;
    let metrics = |out: &RunOutcome| std::fs::read(out.dir.metrics()).unwrap();

    let a = run_through(&cfg, &root.join("a"), Stage::Skills).unwrap();
    let b = run_through(&cfg, &root.join("b"), Stage::Skills).unwrap();
    let same = metrics(&a) == metrics(&b);
    let mut resumed_ok = true;
    for (i, stop) in [Stage::Exploration, Stage::Discovery].into_iter().enumerate() {
        let partial = run_through(&cfg, &root.join(format!("r{i}")), stop).unwrap();
        let resumed = resume(partial.dir.path()).unwrap();
        resumed_ok &= metrics(&resumed) == metrics(&a) && resumed.report == a.report;
    }
    verdict(
        same && resumed_ok,
        format!("rerun byte-identical: {same}; resume after exploration and after discovery identical: {resumed_ok}"),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| f.eq_ignore_ascii_case(id));
    let mut runs = Runs::new();
    let det_root = tempfile::tempdir().expect("temp dir");

    type Check<'a> = Box<dyn FnOnce(&mut Runs) -> Verdict + 'a>;
    let criteria: Vec<(&str, &str, Check)> = vec![
        ("P1", "Bradley-Terry antisymmetry and gradient", Box::new(|_| p1_bradley_terry())),
        ("P2", "reward model holdout accuracy", Box::new(|_| p2_reward_fidelity())),
        ("P3", "region properties", Box::new(|_| p3_region())),
        ("P4", "VQ-VAE mechanics", Box::new(|_| p4_vq_mechanics())),
        ("P5", "guided exploration returns", Box::new(p5_guided_returns)),
        ("P6", "region-restricted skills", Box::new(p6_region_skills)),
        ("P7", "beta ordering", Box::new(p7_beta_order)),
        ("P8", "preferred latent representation", Box::new(p8_preferred_latent)),
        ("P9", "determinism and resume", Box::new(|_| p9_determinism(det_root.path()))),
    ];

    let mut unexpected = Vec::new();
    let mut out = std::io::stdout();
    for (id, name, check) in criteria {
        if !wanted(id) {
            continue;
        }
        let t = Instant::now();
        let v = check(&mut runs);
        let secs = t.elapsed().as_secs_f64();
        let known = KNOWN_FAILURES.contains(&id);
        let tag = match (v.passed, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        writeln!(out, "{id} {tag:<12} {name} [{secs:.0}s]: {}", v.detail).unwrap();
        out.flush().unwrap();
        if !v.passed && !known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        writeln!(out, "unexpected failures: {}", unexpected.join(", ")).unwrap();
        std::process::exit(1);
    }
}
