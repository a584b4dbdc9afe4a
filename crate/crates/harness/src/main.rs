use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use cdp_core::envs::EnvConfig;
use cdp_core::explorer::ExplorationMode;
use cdp_core::preference::{sample_queries, PreferenceDataset};
use cdp_core::vqvae::InputSpace;
use cdp_harness::artifacts::{read_checkpoint, read_manifest, RunDir, Stage};
use cdp_harness::labels::{LabelQueue, LabelServer};
use cdp_harness::pipeline::{evaluate_run, ExplorationCheckpoint, NEAR_CENTROID};
use cdp_harness::plots::make_plots;
use cdp_harness::{beta_sweep, resume, run_pipeline, LabelSourceKind, RunConfig, RUNS_ROOT_ENV};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "cdp", version, about = "Preference-guided skill discovery experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run exploration, discovery and skill learning.
    Run(RunArgs),
    /// Run the pipeline once per beta and compare.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated beta values (defaults to the config's list).
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Serve label queries drawn from a finished exploration stage.
    LabelServe {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        queries: usize,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        ttl_secs: Option<u64>,
    },
    /// Re-evaluate the skills of a completed run.
    Eval {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
    /// Redraw the figures of a run.
    Plot { run_dir: PathBuf },
    /// Continue a run from its last completed stage.
    Resume { run_dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvChoice {
    RoomNav2d,
    LineWalker,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = RUNS_ROOT_ENV, default_value = "runs")]
    runs_root: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    env: Option<EnvChoice>,
    #[arg(long)]
    mode: Option<ExplorationMode>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    queries_per_epoch: Option<usize>,
    #[arg(long)]
    max_queries: Option<usize>,
    #[arg(long)]
    num_skills: Option<usize>,
    /// Codebook input space: raw states or the reward model's latent features.
    #[arg(long, value_parser = parse_space)]
    codebook_input: Option<InputSpace>,
    #[arg(long)]
    discovery_steps: Option<usize>,
    #[arg(long)]
    skill_steps: Option<usize>,
    #[arg(long, value_enum)]
    label_source: Option<LabelSourceKind>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    no_plots: bool,
}

fn parse_space(s: &str) -> Result<InputSpace, String> {
    match s {
        "raw" | "raw_state" => Ok(InputSpace::RawState),
        "latent" | "preferred_latent" => Ok(InputSpace::PreferredLatent),
        _ => Err(format!("unknown input space {s:?} (raw or latent)")),
    }
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(env) = self.env {
            cfg.env = match env {
                EnvChoice::RoomNav2d => EnvConfig::room_nav_2d(),
                EnvChoice::LineWalker => EnvConfig::line_walker(),
            };
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            run_id => cfg.run_id,
            seed => cfg.seed,
            mode => cfg.exploration.mode,
            beta => cfg.exploration.beta_region,
            epochs => cfg.exploration.epochs,
            episodes_per_epoch => cfg.exploration.episodes_per_epoch,
            queries_per_epoch => cfg.exploration.queries_per_epoch,
            max_queries => cfg.exploration.max_queries,
            num_skills => cfg.exploration.num_skills,
            codebook_input => cfg.exploration.codebook_input,
            discovery_steps => cfg.discovery.steps,
            skill_steps => cfg.skills.steps,
            label_source => cfg.label_source,
            bind => cfg.human.bind,
        );
        if self.no_plots {
            cfg.plots = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn label_serve(run_dir: &Path, queries: usize, bind: Option<String>, ttl: Option<u64>) -> anyhow::Result<()> {
    let dir = RunDir::new(run_dir);
    let config = RunConfig::load(&dir.config())?;
    let manifest = read_manifest(&dir)?;
    let Some(cp) = manifest.checkpoint_of(Stage::Exploration) else {
        bail!("{} has no completed exploration stage", run_dir.display());
    };
    let explored: ExplorationCheckpoint = read_checkpoint(&dir.path().join(cp), &manifest.config_hash)?;
    let explorer = &explored.explorer;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let pairs = sample_queries(
        explorer.buffer(),
        config.exploration.segment_len,
        queries,
        config.exploration.query_strategy,
        explorer.reward_model(),
        &mut rng,
    )?;
    let dataset = PreferenceDataset::open(dir.labels(), config.preference.holdout_fraction)?;
    let ttl = Duration::from_secs(ttl.unwrap_or(config.human.query_ttl_secs));
    let queue = Arc::new(LabelQueue::with_dataset(ttl, dataset));
    queue.enqueue(explorer.epoch(), pairs, explorer.env())?;
    let server = LabelServer::start(queue, &bind.unwrap_or(config.human.bind))?;
    println!("serving {queries} queries on http://{} (labels append to {})", server.addr(), dir.labels().display());
    server.join()?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let out = run_pipeline(&cfg, &args.runs_root)?;
            if let Some(r) = &out.report {
                println!(
                    "{}: near-centroid skills {}/{}, mean centroid-to-goal {:?}, velocity variance {:?}",
                    out.dir.path().display(),
                    r.skills_near_centroid(NEAR_CENTROID),
                    r.rows.len(),
                    r.mean_centroid_to_goal,
                    r.velocity_variance
                );
            }
        }
        Command::Sweep { run, betas } => {
            let cfg = run.config()?;
            let betas = betas.unwrap_or_else(|| cfg.betas.clone());
            let report = beta_sweep(&cfg, &betas, &run.runs_root)?;
            println!("{:>6}  {:>20}  {:>18}  status", "beta", "centroid_to_goal", "velocity_variance");
            for c in &report.cells {
                let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
                let status = c.error.as_deref().unwrap_or("ok");
                println!("{:>6}  {:>20}  {:>18}  {status}", c.beta, f(c.mean_centroid_to_goal), f(c.velocity_variance));
            }
            if let Some(b) = report.peak_velocity_variance_beta {
                println!("velocity variance peaks at beta = {b}");
            }
        }
        Command::LabelServe { run_dir, queries, bind, ttl_secs } => label_serve(&run_dir, queries, bind, ttl_secs)?,
        Command::Eval { run_dir, episodes } => {
            let report = evaluate_run(&run_dir, episodes)?;
            println!("{}", serde_json::to_string_pretty(&report.rows)?);
            println!("mean centroid-to-goal: {:?}", report.mean_centroid_to_goal);
            println!("velocity variance: {:?}", report.velocity_variance);
        }
        Command::Plot { run_dir } => {
            let report = make_plots(&run_dir)?;
            for p in &report.written {
                println!("wrote {}", p.display());
            }
            for m in &report.missing {
                println!("skipped {m}");
            }
        }
        Command::Resume { run_dir } => {
            let out = resume(&run_dir)?;
            println!("{} complete", out.dir.path().display());
        }
    }
    Ok(())
}
