//! β sweeps: the full pipeline once per region quantile with shared seeds,
//! plus a comparison table and figures.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::{read_json, write_json, RunDir};
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::pipeline::{run_pipeline, RegionReport, BACKWARD_VELOCITY, NEAR_CENTROID};
use crate::plots::{plot_sweep_metric, plot_sweep_regions, SweepBar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta: f64,
    pub run_id: String,
    /// `None` when the run succeeded.
    pub error: Option<String>,
    pub mean_centroid_to_goal: Option<f64>,
    pub velocity_variance: Option<f64>,
    pub skills_near_centroid: Option<usize>,
    pub skills_backward: Option<usize>,
    pub final_return: Option<f64>,
}

impl SweepCell {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub run_id: String,
    pub cells: Vec<SweepCell>,
    /// β with the largest cross-skill velocity variance, when reported.
    pub peak_velocity_variance_beta: Option<f64>,
}

/// Run id of the β cell.
pub fn cell_run_id(run_id: &str, beta: f64) -> String {
    format!("{run_id}-beta{beta}")
}

/// Config of one sweep cell.
pub fn cell_config(config: &RunConfig, beta: f64) -> RunConfig {
    let mut cfg = config.clone();
    cfg.run_id = cell_run_id(&config.run_id, beta);
    cfg.exploration.beta_region = beta;
    cfg.discovery.beta = None;
    cfg.betas = vec![beta];
    cfg
}

/// Directory holding the sweep's own artifacts.
pub fn sweep_dir(config: &RunConfig, runs_root: &Path) -> PathBuf {
    runs_root.join(format!("{}-sweep", config.run_id))
}

pub fn beta_sweep(config: &RunConfig, betas: &[f64], runs_root: &Path) -> Result<SweepReport> {
    if betas.len() < 2 {
        return Err(HarnessError::Input(format!("a sweep needs at least 2 beta values, got {}", betas.len())));
    }
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(HarnessError::Input(format!("beta {b} outside [0, 1]")));
    }
    let base = RunConfig { betas: betas.to_vec(), ..config.clone() };
    base.validate()?;
    let hash = base.hash();

    let mut cells = Vec::with_capacity(betas.len());
    let mut regions = Vec::new();
    for &beta in betas {
        let cfg = cell_config(&base, beta);
        let run_id = cfg.run_id.clone();
        tracing::info!(beta, run = %run_id, "sweep cell");
        match run_pipeline(&cfg, runs_root) {
            Ok(outcome) => {
                let report = outcome.report.as_ref();
                cells.push(SweepCell {
                    beta,
                    run_id,
                    error: None,
                    mean_centroid_to_goal: report.and_then(|r| r.mean_centroid_to_goal),
                    velocity_variance: report.and_then(|r| r.velocity_variance),
                    skills_near_centroid: report.map(|r| r.skills_near_centroid(NEAR_CENTROID)),
                    skills_backward: report.filter(|r| r.velocity_variance.is_some()).map(|r| r.skills_slower_than(BACKWARD_VELOCITY)),
                    final_return: outcome.tail_mean("mean_oracle_return", 5),
                });
                let region: RegionReport = read_json(&outcome.dir.report("region.json"), &cfg.hash())?;
                regions.push((beta, region));
            }
            Err(e) => {
                tracing::error!(beta, "sweep cell failed: {e}");
                cells.push(SweepCell {
                    beta,
                    run_id,
                    error: Some(e.to_string()),
                    mean_centroid_to_goal: None,
                    velocity_variance: None,
                    skills_near_centroid: None,
                    skills_backward: None,
                    final_return: None,
                });
            }
        }
    }

    let peak_velocity_variance_beta = cells
        .iter()
        .filter_map(|c| c.velocity_variance.map(|v| (c.beta, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(b, _)| b);
    let report = SweepReport { run_id: base.run_id.clone(), cells, peak_velocity_variance_beta };

    let dir = RunDir::create(sweep_dir(&base, runs_root))?;
    std::fs::write(dir.config(), base.to_toml()?)?;
    write_json(&dir.report("comparison.json"), &hash, &report)?;
    write_comparison_csv(&dir.report("comparison.csv"), &hash, &report)?;
    if base.plots {
        let bars = |f: fn(&SweepCell) -> Option<f64>| -> Vec<SweepBar> {
            report.cells.iter().map(|c| SweepBar { beta: c.beta, value: f(c) }).collect()
        };
        let goal = bars(|c| c.mean_centroid_to_goal);
        if goal.iter().any(|b| b.value.is_some()) {
            plot_sweep_metric(
                &dir.plot("centroid_to_goal.svg"),
                &hash,
                "Mean centroid-to-goal distance",
                "distance",
                &goal,
            )?;
        }
        let var = bars(|c| c.velocity_variance);
        if var.iter().any(|b| b.value.is_some()) {
            plot_sweep_metric(
                &dir.plot("velocity_variance.svg"),
                &hash,
                "Variance of mean velocity across skills",
                "variance",
                &var,
            )?;
        }
        if !regions.is_empty() {
            plot_sweep_regions(&dir.plot("regions.svg"), &hash, &base, &regions)?;
        }
    }
    Ok(report)
}

fn write_comparison_csv(path: &Path, hash: &str, report: &SweepReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_hash",
        "beta",
        "run_id",
        "status",
        "mean_centroid_to_goal",
        "velocity_variance",
        "skills_near_centroid",
        "skills_backward",
        "final_return",
    ])?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let u = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &report.cells {
        w.write_record([
            hash.to_string(),
            c.beta.to_string(),
            c.run_id.clone(),
            match &c.error {
                None => "ok".to_string(),
                Some(e) => format!("failed: {e}"),
            },
            f(c.mean_centroid_to_goal),
            f(c.velocity_variance),
            u(c.skills_near_centroid),
            u(c.skills_backward),
            f(c.final_return),
        ])?;
    }
    w.flush()?;
    Ok(())
}
