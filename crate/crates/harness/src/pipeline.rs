//! The three-stage pipeline: exploration, discovery on the preferred region,
//! and skill learning on the discovered codebook.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use cdp_core::envs::Environment;
use cdp_core::explorer::{EpochMetrics, Explorer, LabelSource, OracleLabels};
use cdp_core::nn::InputScaler;
use cdp_core::preference::{PreferenceDataset, RewardModel};
use cdp_core::region::{estimate_region_with_floor, RegionSnapshot, RewardSummary};
use cdp_core::skills::{evaluate_skills, SkillEvalReport, SkillSet, SkillTrainer};
use cdp_core::vqvae::{InputSpace, SkillCodebook, VqConfig, VqLossReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    read_checkpoint, read_manifest, write_checkpoint, write_json, write_manifest, write_metrics_csv, CompletedStage,
    MetricsRow, RunDir, RunManifest, Stage, StageFailure,
};
use crate::config::{LabelSourceKind, RunConfig};
use crate::error::{HarnessError, Result};
use crate::labels::{HumanLabels, LabelQueue, LabelServer};
use crate::plots::make_plots;

/// Skills within this distance of their centroid count as converged.
pub const NEAR_CENTROID: f64 = 0.3;
/// Skills with mean velocity below this count as moving backward.
pub const BACKWARD_VELOCITY: f64 = -0.05;

/// Seed of a stage's generator: the run seed on the stage's own stream.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage.index());
    rng.random()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplorationCheckpoint {
    pub explorer: Explorer,
    pub rows: Vec<MetricsRow>,
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscoveryCheckpoint {
    pub codebook: SkillCodebook,
    /// Present when the codebook reads the reward model's latent features.
    pub reward_model: Option<RewardModel>,
    pub region: RegionSnapshot,
    pub loss: VqLossReport,
    pub rows: Vec<MetricsRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkillsCheckpoint {
    pub skills: SkillSet,
    pub report: SkillEvalReport,
    pub rows: Vec<MetricsRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub size: usize,
    pub candidates: usize,
    pub rewards: RewardSummary,
    pub model_version: u64,
    #[serde(flatten)]
    pub snapshot: RegionSnapshot,
}

/// What a finished (or stopped) run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: RunDir,
    pub manifest: RunManifest,
    pub rows: Vec<MetricsRow>,
    pub report: Option<SkillEvalReport>,
}

impl RunOutcome {
    /// Mean of `metric` over the last `n` exploration epochs.
    pub fn tail_mean(&self, metric: &str, n: usize) -> Option<f64> {
        let vals: Vec<f64> =
            self.rows.iter().filter(|r| r.stage == Stage::Exploration).filter_map(|r| r.get(metric)).collect();
        if vals.is_empty() {
            return None;
        }
        let tail = &vals[vals.len().saturating_sub(n)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Runs every stage of `config` under `runs_root/<run_id>`.
pub fn run_pipeline(config: &RunConfig, runs_root: &Path) -> Result<RunOutcome> {
    run_through(config, runs_root, Stage::Skills)
}

/// Runs stages up to and including `last`. An existing run directory with
/// the same config hash is resumed; a different hash is rejected.
pub fn run_through(config: &RunConfig, runs_root: &Path, last: Stage) -> Result<RunOutcome> {
    config.validate()?;
    let dir = RunDir::create(runs_root.join(&config.run_id))?;
    let hash = config.hash();
    let manifest = if dir.manifest().exists() {
        let m = read_manifest(&dir)?;
        crate::artifacts::check_hash(&dir.manifest(), &hash, &m.config_hash)?;
        m
    } else {
        std::fs::write(dir.config(), config.to_toml()?)?;
        let m = RunManifest {
            run_id: config.run_id.clone(),
            config_hash: hash,
            seed: config.seed,
            stage_seeds: Stage::ALL.iter().map(|s| (*s, stage_seed(config.seed, *s))).collect(),
            completed: Vec::new(),
            failure: None,
        };
        write_manifest(&dir, &m)?;
        m
    };
    Pipeline { config: config.clone(), dir, manifest }.run(last)
}

/// Continues the run stored in `run_dir` from its last completed stage.
pub fn resume(run_dir: &Path) -> Result<RunOutcome> {
    let dir = RunDir::new(run_dir);
    let config = RunConfig::load(&dir.config())?;
    let manifest = read_manifest(&dir)?;
    crate::artifacts::check_hash(&dir.manifest(), &config.hash(), &manifest.config_hash)?;
    Pipeline { config, dir, manifest }.run(Stage::Skills)
}

struct Pipeline {
    config: RunConfig,
    dir: RunDir,
    manifest: RunManifest,
}

impl Pipeline {
    fn hash(&self) -> String {
        self.manifest.config_hash.clone()
    }

    fn seed(&self, stage: Stage) -> u64 {
        self.manifest.stage_seeds[&stage]
    }

    fn run(mut self, last: Stage) -> Result<RunOutcome> {
        self.manifest.failure = None;
        let mut rows = Vec::new();
        let mut report = None;
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            let result = match self.manifest.checkpoint_of(stage) {
                Some(cp) => self.reload(stage, cp).map(|(r, rep)| {
                    report = rep.or(report.take());
                    (r, None)
                }),
                None => {
                    tracing::info!(run = %self.config.run_id, %stage, "stage started");
                    match stage {
                        Stage::Exploration => self.explore(&rows),
                        Stage::Discovery => self.discover(),
                        Stage::Skills => self.learn_skills().map(|(r, rep)| {
                            report = Some(rep);
                            r
                        }),
                    }
                    .map(|(r, cp)| (r, Some(cp)))
                }
            };
            match result {
                Ok((stage_rows, checkpoint)) => {
                    rows.extend(stage_rows);
                    if let Some(checkpoint) = checkpoint {
                        self.manifest.completed.push(CompletedStage { stage, checkpoint });
                        write_manifest(&self.dir, &self.manifest)?;
                    }
                }
                Err(e) => {
                    tracing::error!(run = %self.config.run_id, %stage, "stage failed: {e}");
                    self.manifest.failure = Some(StageFailure { stage, error: e.to_string() });
                    write_manifest(&self.dir, &self.manifest)?;
                    return Err(HarnessError::Stage { stage: stage.to_string(), reason: e.to_string() });
                }
            }
        }
        write_metrics_csv(&self.dir.metrics(), &self.hash(), &rows)?;
        if self.config.plots {
            let plots = make_plots(self.dir.path())?;
            for missing in &plots.missing {
                tracing::debug!("plot skipped: {missing}");
            }
        }
        Ok(RunOutcome { dir: self.dir, manifest: self.manifest, rows, report })
    }

    /// Rows (and the skill report) of a stage that already completed.
    fn reload(&self, stage: Stage, checkpoint: &str) -> Result<(Vec<MetricsRow>, Option<SkillEvalReport>)> {
        let path = self.dir.path().join(checkpoint);
        Ok(match stage {
            Stage::Exploration => (read_checkpoint::<ExplorationCheckpoint>(&path, &self.hash())?.rows, None),
            Stage::Discovery => (read_checkpoint::<DiscoveryCheckpoint>(&path, &self.hash())?.rows, None),
            Stage::Skills => {
                let cp: SkillsCheckpoint = read_checkpoint(&path, &self.hash())?;
                (cp.rows, Some(cp.report))
            }
        })
    }

    fn checkpoint_name(&self, stage: Stage, epoch: usize) -> String {
        format!("checkpoints/{stage}-{epoch}.cbor")
    }

    fn explore(&self, prior_rows: &[MetricsRow]) -> Result<(Vec<MetricsRow>, String)> {
        let cfg = &self.config;
        let env = Environment::new(cfg.env.clone())?;
        // A restarted exploration relabels from scratch.
        std::fs::write(self.dir.labels(), b"")?;
        let mut dataset = PreferenceDataset::open(self.dir.labels(), cfg.preference.holdout_fraction)?;
        let mut explorer = Explorer::new(
            env.clone(),
            cfg.exploration.clone(),
            cfg.sac.clone(),
            cfg.preference.model.clone(),
            cfg.discovery.codebook.clone(),
            self.seed(Stage::Exploration),
        )?;

        let mut _server = None;
        let mut labels: Box<dyn LabelSource> = match cfg.label_source {
            LabelSourceKind::Oracle => Box::new(OracleLabels::new(env.oracle())),
            kind => {
                let queue = Arc::new(LabelQueue::new(Duration::from_secs(cfg.human.query_ttl_secs)));
                _server = Some(LabelServer::start(queue.clone(), &cfg.human.bind)?);
                let human = HumanLabels::new(queue, env.clone(), cfg.human.min_labels);
                if kind == LabelSourceKind::HumanWithOracleFallback {
                    Box::new(human.with_oracle_fallback(Duration::from_secs(cfg.human.fallback_timeout_secs), env.oracle()))
                } else {
                    Box::new(human)
                }
            }
        };

        let mut rows = Vec::new();
        let mut epochs = Vec::new();
        while !explorer.is_done() {
            let m = explorer.run_epoch(&mut dataset, labels.as_mut())?;
            tracing::info!(
                epoch = m.epoch,
                oracle_return = m.mean_oracle_return,
                labels = m.label_count,
                region = m.region_size,
                "exploration epoch"
            );
            rows.push(exploration_row(&m));
            epochs.push(m);
            let mut all = prior_rows.to_vec();
            all.extend(rows.iter().cloned());
            write_metrics_csv(&self.dir.metrics(), &self.hash(), &all)?;
        }

        write_visited_states(&self.dir.report("visited_states.csv"), &self.hash(), &explorer)?;
        let epoch = explorer.epoch();
        let name = self.checkpoint_name(Stage::Exploration, epoch);
        let cp = ExplorationCheckpoint { explorer, rows: rows.clone(), epochs };
        write_checkpoint(&self.dir.checkpoint(Stage::Exploration, epoch), &self.hash(), Stage::Exploration, epoch, &cp)?;
        Ok((rows, name))
    }

    fn load_exploration(&self) -> Result<ExplorationCheckpoint> {
        let cp = self
            .manifest
            .checkpoint_of(Stage::Exploration)
            .ok_or_else(|| HarnessError::Input("discovery needs a completed exploration stage".into()))?;
        read_checkpoint(&self.dir.path().join(cp), &self.hash())
    }

    fn discover(&self) -> Result<(Vec<MetricsRow>, String)> {
        let cfg = &self.config;
        let explored = self.load_exploration()?;
        let explorer = &explored.explorer;
        let model = explorer.reward_model();
        let candidates = explorer.buffer().recent_states(cfg.discovery.candidate_pool);
        let beta = cfg.discovery_beta();
        let region =
            estimate_region_with_floor(model, &candidates, beta, cfg.exploration.min_region_members)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(Stage::Discovery));
        let vq = VqConfig { num_codes: cfg.exploration.num_skills, ..cfg.discovery.codebook.clone() };
        let space = cfg.exploration.codebook_input;
        let scaler = match space {
            InputSpace::RawState => {
                let b = explorer.env().state_box();
                InputScaler::from_bounds(&b.low, &b.high)
            }
            InputSpace::PreferredLatent => InputScaler::identity(model.latent_dim()),
        };
        let mut codebook = SkillCodebook::new(vq, space, scaler, rng.random())?;
        let latent_model = (space == InputSpace::PreferredLatent).then(|| model.clone());
        let loss = codebook.fit_discovery(&region, latent_model.as_ref(), cfg.discovery.steps, &mut rng)?;

        let mut row = MetricsRow::new(Stage::Discovery, 0);
        row.set("beta", beta)
            .set("region_size", region.members().len() as f64)
            .set("candidates", candidates.len() as f64)
            .set("threshold", region.threshold())
            .set("reconstruction", loss.reconstruction)
            .set("codebook_loss", loss.codebook)
            .set("commitment", loss.commitment)
            .set("vq_loss", loss.total);
        for (k, u) in codebook.usage().iter().enumerate() {
            row.set(format!("usage_{k}"), *u as f64);
        }

        let snapshot = region.snapshot(explorer.epoch());
        let report = RegionReport {
            size: region.members().len(),
            candidates: candidates.len(),
            rewards: region.summary(),
            model_version: region.model_version(),
            snapshot: snapshot.clone(),
        };
        write_json(&self.dir.report("region.json"), &self.hash(), &report)?;
        write_json(&self.dir.report("centroids.json"), &self.hash(), &centroids(&codebook)?)?;

        let rows = vec![row];
        let cp = DiscoveryCheckpoint { codebook, reward_model: latent_model, region: snapshot, loss, rows: rows.clone() };
        write_checkpoint(&self.dir.checkpoint(Stage::Discovery, 0), &self.hash(), Stage::Discovery, 0, &cp)?;
        Ok((rows, self.checkpoint_name(Stage::Discovery, 0)))
    }

    fn learn_skills(&self) -> Result<((Vec<MetricsRow>, String), SkillEvalReport)> {
        let cfg = &self.config;
        let cp = self
            .manifest
            .checkpoint_of(Stage::Discovery)
            .ok_or_else(|| HarnessError::Input("skill learning needs a completed discovery stage".into()))?;
        let discovered: DiscoveryCheckpoint = read_checkpoint(&self.dir.path().join(cp), &self.hash())?;
        let env = Environment::new(cfg.env.clone())?;
        let mut trainer = SkillTrainer::new(
            discovered.codebook,
            discovered.reward_model,
            env.clone(),
            cfg.sac.clone(),
            self.seed(Stage::Skills),
        )?;

        let total = cfg.skills.steps;
        let chunk = if cfg.skills.eval_every == 0 { total.max(1) } else { cfg.skills.eval_every };
        let mut rows = Vec::new();
        let mut epoch = 0;
        loop {
            let remaining = total.saturating_sub(trainer.steps());
            if remaining > 0 {
                trainer.train(remaining.min(chunk))?;
            }
            let report = evaluate_skills(&trainer.snapshot(), &env, cfg.skills.eval_episodes)?;
            rows.push(skills_row(epoch, trainer.steps(), &report));
            tracing::info!(
                steps = trainer.steps(),
                near = report.skills_near_centroid(NEAR_CENTROID),
                "skill evaluation"
            );
            epoch += 1;
            if trainer.steps() >= total {
                break;
            }
        }

        let skills = trainer.finish();
        let report = evaluate_skills(&skills, &env, cfg.skills.eval_episodes)?;
        write_skill_reports(&self.dir, &self.hash(), &report)?;
        let last = rows.len() - 1;
        let cp = SkillsCheckpoint { skills, report: report.clone(), rows: rows.clone() };
        write_checkpoint(&self.dir.checkpoint(Stage::Skills, last), &self.hash(), Stage::Skills, last, &cp)?;
        Ok(((rows, self.checkpoint_name(Stage::Skills, last)), report))
    }
}

fn exploration_row(m: &EpochMetrics) -> MetricsRow {
    let mut row = MetricsRow::new(Stage::Exploration, m.epoch);
    row.set("mean_oracle_return", m.mean_oracle_return)
        .set("mean_reward", m.mean_reward)
        .set("mean_preference_term", m.mean_preference_term)
        .set("mean_novelty_term", m.mean_novelty_term)
        .set("mean_diversity_term", m.mean_diversity_term)
        .set("region_size", m.region_size as f64)
        .set("label_count", m.label_count as f64)
        .set("reward_model_version", m.reward_model_version as f64)
        .set("policy_updates", m.policy_updates as f64)
        .set("transitions", m.transitions as f64);
    if let Some(acc) = m.holdout_accuracy {
        row.set("holdout_accuracy", acc);
    }
    for (k, u) in m.codebook_usage.iter().enumerate() {
        row.set(format!("usage_{k}"), *u as f64);
    }
    row
}

fn skills_row(epoch: usize, steps: usize, report: &SkillEvalReport) -> MetricsRow {
    let n = report.rows.len().max(1) as f64;
    let mut row = MetricsRow::new(Stage::Skills, epoch);
    row.set("steps", steps as f64)
        .set("mean_centroid_distance", report.rows.iter().map(|r| r.centroid_distance).sum::<f64>() / n)
        .set("mean_oracle_return", report.rows.iter().map(|r| r.mean_oracle_return).sum::<f64>() / n)
        .set("skills_near_centroid", report.skills_near_centroid(NEAR_CENTROID) as f64)
        .set("pairwise_final_distance", report.mean_pairwise_final_distance());
    if let Some(d) = report.mean_centroid_to_goal {
        row.set("mean_centroid_to_goal", d);
    }
    if let Some(v) = report.velocity_variance {
        row.set("velocity_variance", v);
        row.set("skills_backward", report.skills_slower_than(BACKWARD_VELOCITY) as f64);
    }
    row
}

/// One line per buffered transition: time index, episode, skill, visited state.
fn write_visited_states(path: &Path, hash: &str, explorer: &Explorer) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["config_hash", "t", "episode", "skill", "s0", "s1"])?;
    for (t, tr) in explorer.buffer().iter().enumerate() {
        w.write_record([
            hash.to_string(),
            t.to_string(),
            tr.episode.to_string(),
            tr.skill.to_string(),
            tr.next_state.0[0].to_string(),
            tr.next_state.0[1].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidReport {
    pub input_space: InputSpace,
    pub centroids: Vec<Vec<f64>>,
}

fn centroids(codebook: &SkillCodebook) -> Result<CentroidReport> {
    let centroids = (0..codebook.num_codes()).map(|k| codebook.centroid(k)).collect::<cdp_core::Result<Vec<_>>>()?;
    Ok(CentroidReport { input_space: codebook.input_space(), centroids })
}

fn write_skill_reports(dir: &RunDir, hash: &str, report: &SkillEvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.report("skills.csv"))?;
    w.write_record([
        "config_hash",
        "skill",
        "final_s0",
        "final_s1",
        "centroid",
        "centroid_distance",
        "goal_distance",
        "mean_oracle_return",
        "mean_velocity",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.rows {
        let centroid: Vec<String> = r.centroid.iter().map(|c| c.to_string()).collect();
        w.write_record([
            hash.to_string(),
            r.skill.to_string(),
            r.final_state[0].to_string(),
            r.final_state[1].to_string(),
            centroid.join(";"),
            r.centroid_distance.to_string(),
            opt(r.goal_distance),
            r.mean_oracle_return.to_string(),
            opt(r.mean_velocity),
        ])?;
    }
    w.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.report("trajectories.jsonl"))?);
    for t in &report.trajectories {
        let line = serde_json::json!({
            "config_hash": hash,
            "skill": t.skill,
            "episode": t.episode,
            "points": t.points,
        });
        writeln!(f, "{line}")?;
    }
    f.flush()?;

    #[derive(Serialize)]
    struct Aggregates {
        mean_centroid_to_goal: Option<f64>,
        velocity_variance: Option<f64>,
        skills_near_centroid: usize,
        skills_backward: usize,
        mean_pairwise_final_distance: f64,
    }
    let agg = Aggregates {
        mean_centroid_to_goal: report.mean_centroid_to_goal,
        velocity_variance: report.velocity_variance,
        skills_near_centroid: report.skills_near_centroid(NEAR_CENTROID),
        skills_backward: report.skills_slower_than(BACKWARD_VELOCITY),
        mean_pairwise_final_distance: report.mean_pairwise_final_distance(),
    };
    write_json(&dir.report("report.json"), hash, &agg)?;
    Ok(())
}

/// Reads the final skill report out of a completed run.
pub fn load_skill_report(run_dir: &Path) -> Result<SkillEvalReport> {
    let dir = RunDir::new(run_dir);
    let manifest = read_manifest(&dir)?;
    let cp = manifest
        .checkpoint_of(Stage::Skills)
        .ok_or_else(|| HarnessError::Input(format!("{} has no completed skills stage", run_dir.display())))?;
    let skills: SkillsCheckpoint = read_checkpoint(&dir.path().join(cp), &manifest.config_hash)?;
    Ok(skills.report)
}

/// Re-evaluates the stored skills of a completed run.
pub fn evaluate_run(run_dir: &Path, episodes: usize) -> Result<SkillEvalReport> {
    let dir = RunDir::new(run_dir);
    let config = RunConfig::load(&dir.config())?;
    let manifest = read_manifest(&dir)?;
    let cp = manifest
        .checkpoint_of(Stage::Skills)
        .ok_or_else(|| HarnessError::Input(format!("{} has no completed skills stage", run_dir.display())))?;
    let skills: SkillsCheckpoint = read_checkpoint(&dir.path().join(cp), &config.hash())?;
    Ok(evaluate_skills(&skills.skills, &Environment::new(config.env)?, episodes)?)
}

/// Exploration metrics keyed by epoch, for callers that only need returns.
pub fn exploration_returns(rows: &[MetricsRow]) -> BTreeMap<usize, f64> {
    rows.iter()
        .filter(|r| r.stage == Stage::Exploration)
        .filter_map(|r| r.get("mean_oracle_return").map(|v| (r.epoch, v)))
        .collect()
}
