//! SVG figures for a run directory. Every file carries the run's config hash
//! in a leading XML comment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::coord::Shift;
use plotters::prelude::*;
use serde::Deserialize;

use crate::artifacts::{read_json, read_manifest, read_metrics_csv, RunDir, Stage};
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::pipeline::RegionReport;

/// The visited-state scatter draws at most this many points; longer buffers
/// are subsampled at stride `ceil(transitions / MAX_SCATTER_POINTS)`.
pub const MAX_SCATTER_POINTS: usize = 5000;

const SIZE: (u32, u32) = (640, 480);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotReport {
    pub written: Vec<PathBuf>,
    /// Plots that could not be drawn, with the input they lacked.
    pub missing: Vec<String>,
    pub transitions: usize,
    pub scatter_stride: usize,
    pub scatter_points: usize,
}

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

/// Prepends the hash comment to a finished SVG.
fn stamp(path: &Path, hash: &str) -> Result<()> {
    let body = std::fs::read_to_string(path)?;
    std::fs::write(path, format!("<!-- config_hash: {hash} -->\n{body}"))?;
    Ok(())
}

/// Hash recorded in an SVG written by this module.
pub fn svg_config_hash(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .next()
        .and_then(|l| l.strip_prefix("<!-- config_hash: "))
        .and_then(|l| l.strip_suffix(" -->"))
        .map(str::to_string)
        .ok_or_else(|| HarnessError::Corrupt { path: path.display().to_string(), reason: "no config hash".into() })
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let pad = ((hi - lo).abs() * 0.05).max(1e-3);
    (lo - pad)..(hi + pad)
}

fn extent(points: impl Iterator<Item = (f64, f64)>) -> Option<(std::ops::Range<f64>, std::ops::Range<f64>)> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    x0.is_finite().then(|| (padded(x0, x1), padded(y0, y1)))
}

/// State-space axes: the environment box.
fn state_axes(config: &RunConfig) -> Result<(std::ops::Range<f64>, std::ops::Range<f64>, &'static str, &'static str)> {
    let b = cdp_core::envs::Environment::new(config.env.clone())?.state_box();
    let (lo, hi) = (b.low, b.high);
    let (xl, yl) = match config.env.env_name {
        cdp_core::envs::EnvName::RoomNav2d => ("x", "y"),
        cdp_core::envs::EnvName::LineWalker => ("position", "velocity"),
    };
    Ok((padded(lo[0], hi[0]), padded(lo[1], hi[1]), xl, yl))
}

fn skill_color(k: usize) -> RGBColor {
    let c = Palette99::pick(k).to_rgba();
    RGBColor(c.0, c.1, c.2)
}

/// Light grey for early points, near black for late ones.
fn time_shade(frac: f64) -> RGBColor {
    let v = (215.0 - 195.0 * frac.clamp(0.0, 1.0)) as u8;
    RGBColor(v, v, v)
}

type Area<'a> = DrawingArea<SVGBackend<'a>, Shift>;

fn canvas(path: &Path) -> Result<Area<'_>> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    Ok(root)
}

#[derive(Deserialize)]
struct VisitedRow {
    t: usize,
    s0: f64,
    s1: f64,
}

#[derive(Deserialize)]
struct TrajectoryLine {
    skill: usize,
    points: Vec<[f64; 2]>,
}

#[derive(Deserialize)]
struct SkillLine {
    skill: usize,
    final_s0: f64,
    final_s1: f64,
    centroid: String,
}

/// Draws every figure whose inputs exist in `run_dir`.
pub fn make_plots(run_dir: &Path) -> Result<PlotReport> {
    let dir = RunDir::new(run_dir);
    let config = RunConfig::load(&dir.config())?;
    let manifest = read_manifest(&dir)?;
    let hash = manifest.config_hash.clone();
    let mut report = PlotReport::default();

    let record = |report: &mut PlotReport, name: &str, outcome: Result<bool>| -> Result<()> {
        match outcome {
            Ok(true) => {
                let path = dir.plot(name);
                stamp(&path, &hash)?;
                report.written.push(path);
            }
            Ok(false) => {}
            Err(e) => report.missing.push(format!("{name}: {e}")),
        }
        Ok(())
    };

    let r = plot_returns(&dir, &hash);
    record(&mut report, "returns.svg", r)?;
    let r = plot_visited(&dir, &hash, &config, &mut report);
    record(&mut report, "visited_states.svg", r)?;

    let skills_done = manifest.is_complete(Stage::Skills);
    if manifest.is_complete(Stage::Discovery) {
        let r = plot_region(&dir, &hash, &config);
        record(&mut report, "region.svg", r)?;
    } else {
        report.missing.push("region.svg: discovery stage not complete".into());
    }
    if skills_done {
        let r = plot_trajectories(&dir, &config);
        record(&mut report, "skill_trajectories.svg", r)?;
        let r = plot_endpoints(&dir, &config);
        record(&mut report, "skill_endpoints.svg", r)?;
    } else {
        report.missing.push("skill_trajectories.svg: skills stage not complete".into());
        report.missing.push("skill_endpoints.svg: skills stage not complete".into());
    }
    Ok(report)
}

fn plot_returns(dir: &RunDir, hash: &str) -> Result<bool> {
    let rows = read_metrics_csv(&dir.metrics(), hash)?;
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.stage == Stage::Exploration)
        .filter_map(|r| r.get("mean_oracle_return").map(|v| (r.epoch as f64, v)))
        .collect();
    let Some((xs, ys)) = extent(pts.iter().copied()) else {
        return Err(HarnessError::Input("no exploration returns in metrics.csv".into()));
    };
    let path = dir.plot("returns.svg");
    let root = canvas(&path)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Mean oracle return per exploration epoch", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(xs, ys)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc("mean oracle return").draw().map_err(plot_err)?;
    chart.draw_series(LineSeries::new(pts.iter().copied(), BLUE.stroke_width(2))).map_err(plot_err)?;
    chart.draw_series(pts.iter().map(|p| Circle::new(*p, 3, BLUE.filled()))).map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(true)
}

fn plot_visited(dir: &RunDir, hash: &str, config: &RunConfig, report: &mut PlotReport) -> Result<bool> {
    let path = dir.report("visited_states.csv");
    let mut reader = csv::Reader::from_path(&path)?;
    let header = reader.headers()?.clone();
    let mut rows: Vec<VisitedRow> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        crate::artifacts::check_hash(&path, hash, &rec[0])?;
        rows.push(rec.deserialize(Some(&header))?);
    }
    report.transitions = rows.len();
    report.scatter_stride = rows.len().div_ceil(MAX_SCATTER_POINTS).max(1);
    let shown: Vec<&VisitedRow> = rows.iter().step_by(report.scatter_stride).collect();
    report.scatter_points = shown.len();

    let (xs, ys, xl, yl) = state_axes(config)?;
    let out = dir.plot("visited_states.svg");
    let root = canvas(&out)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Visited states (darker = later)", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(xs, ys)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(xl).y_desc(yl).draw().map_err(plot_err)?;
    let last = rows.len().saturating_sub(1).max(1) as f64;
    chart
        .draw_series(shown.iter().map(|r| Circle::new((r.s0, r.s1), 2, time_shade(r.t as f64 / last).filled())))
        .map_err(plot_err)?;
    draw_goal(&mut chart, config)?;
    root.present().map_err(plot_err)?;
    Ok(true)
}

fn draw_goal<DB: DrawingBackend>(
    chart: &mut ChartContext<'_, DB, Cartesian2d<plotters::coord::types::RangedCoordf64, plotters::coord::types::RangedCoordf64>>,
    config: &RunConfig,
) -> Result<()> {
    if config.env.env_name == cdp_core::envs::EnvName::RoomNav2d {
        let g = config.env.goal;
        chart
            .draw_series(std::iter::once(TriangleMarker::new((g[0], g[1]), 8, RED.filled())))
            .map_err(plot_err)?
            .label("goal")
            .legend(|(x, y)| TriangleMarker::new((x, y), 6, RED.filled()));
    }
    Ok(())
}

fn plot_region(dir: &RunDir, hash: &str, config: &RunConfig) -> Result<bool> {
    let region: RegionReport = read_json(&dir.report("region.json"), hash)?;
    let out = dir.plot("region.svg");
    let root = canvas(&out)?;
    draw_region(&root, &region, config, &format!("Preferred region, beta = {}", region.snapshot.beta))?;
    root.present().map_err(plot_err)?;
    Ok(true)
}

fn draw_region(area: &Area<'_>, region: &RegionReport, config: &RunConfig, caption: &str) -> Result<()> {
    let (xs, ys, xl, yl) = state_axes(config)?;
    let mut chart = ChartBuilder::on(area)
        .caption(caption, ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(32)
        .y_label_area_size(40)
        .build_cartesian_2d(xs, ys)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(xl).y_desc(yl).draw().map_err(plot_err)?;
    let stride = region.snapshot.members.len().div_ceil(MAX_SCATTER_POINTS).max(1);
    chart
        .draw_series(
            region.snapshot.members.iter().step_by(stride).map(|m| Circle::new((m[0], m[1]), 2, BLUE.mix(0.5).filled())),
        )
        .map_err(plot_err)?;
    draw_goal(&mut chart, config)?;
    Ok(())
}

fn plot_trajectories(dir: &RunDir, config: &RunConfig) -> Result<bool> {
    let text = std::fs::read_to_string(dir.report("trajectories.jsonl"))?;
    let lines: Vec<TrajectoryLine> =
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
    let Some((xs, ys)) = extent(lines.iter().flat_map(|l| l.points.iter().map(|p| (p[0], p[1])))) else {
        return Err(HarnessError::Input("no skill trajectories".into()));
    };
    let (xs, ys) = match config.env.env_name {
        cdp_core::envs::EnvName::RoomNav2d => {
            let (x, y, _, _) = state_axes(config)?;
            (x, y)
        }
        cdp_core::envs::EnvName::LineWalker => (xs, ys),
    };
    let (xl, yl) = match config.env.env_name {
        cdp_core::envs::EnvName::RoomNav2d => ("x", "y"),
        cdp_core::envs::EnvName::LineWalker => ("t", "position"),
    };
    let out = dir.plot("skill_trajectories.svg");
    let root = canvas(&out)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Skill rollouts (deterministic)", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(xs, ys)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(xl).y_desc(yl).draw().map_err(plot_err)?;
    for l in &lines {
        let color = skill_color(l.skill);
        chart
            .draw_series(LineSeries::new(l.points.iter().map(|p| (p[0], p[1])), color.stroke_width(2)))
            .map_err(plot_err)?;
        if let Some(end) = l.points.last() {
            chart.draw_series(std::iter::once(Circle::new((end[0], end[1]), 4, color.filled()))).map_err(plot_err)?;
        }
    }
    if config.env.env_name == cdp_core::envs::EnvName::RoomNav2d {
        draw_goal(&mut chart, config)?;
    }
    root.present().map_err(plot_err)?;
    Ok(true)
}

fn plot_endpoints(dir: &RunDir, config: &RunConfig) -> Result<bool> {
    let mut reader = csv::Reader::from_path(dir.report("skills.csv"))?;
    let rows: Vec<SkillLine> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    let (xs, ys, xl, yl) = state_axes(config)?;
    let out = dir.plot("skill_endpoints.svg");
    let root = canvas(&out)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Skill final states (dot) and centroids (cross)", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(xs, ys)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(xl).y_desc(yl).draw().map_err(plot_err)?;
    for r in &rows {
        let color = skill_color(r.skill);
        let end = (r.final_s0, r.final_s1);
        chart.draw_series(std::iter::once(Circle::new(end, 5, color.filled()))).map_err(plot_err)?;
        // Latent centroids have no place in state space.
        let c: Vec<f64> = r.centroid.split(';').filter_map(|v| v.parse().ok()).collect();
        if c.len() == 2 {
            chart.draw_series(std::iter::once(Cross::new((c[0], c[1]), 6, color.stroke_width(2)))).map_err(plot_err)?;
            chart.draw_series(LineSeries::new([end, (c[0], c[1])], color.mix(0.4))).map_err(plot_err)?;
        }
    }
    draw_goal(&mut chart, config)?;
    root.present().map_err(plot_err)?;
    Ok(true)
}

/// One sweep cell for the comparison bar chart.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepBar {
    pub beta: f64,
    pub value: Option<f64>,
}

/// Bar chart of one metric across β values; failed cells are drawn as gaps.
pub fn plot_sweep_metric(path: &Path, hash: &str, title: &str, metric: &str, bars: &[SweepBar]) -> Result<()> {
    let vals: Vec<f64> = bars.iter().filter_map(|b| b.value).collect();
    let top = vals.iter().cloned().fold(0.0f64, f64::max).max(1e-6) * 1.15;
    let labels: BTreeMap<usize, String> = bars.iter().enumerate().map(|(i, b)| (i, format!("{}", b.beta))).collect();
    {
        let root = canvas(path)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(-0.5f64..(bars.len() as f64 - 0.5), 0.0..top)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(bars.len())
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 {
                    labels.get(&(i as usize)).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .x_desc("beta")
            .y_desc(metric)
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(bars.iter().enumerate().filter_map(|(i, b)| {
                b.value.map(|v| Rectangle::new([(i as f64 - 0.3, 0.0), (i as f64 + 0.3, v)], BLUE.mix(0.7).filled()))
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    stamp(path, hash)
}

/// Region snapshots side by side, one panel per β.
pub fn plot_sweep_regions(path: &Path, hash: &str, config: &RunConfig, regions: &[(f64, RegionReport)]) -> Result<()> {
    if regions.is_empty() {
        return Err(HarnessError::Input("no region snapshots to plot".into()));
    }
    {
        let root = SVGBackend::new(path, (360 * regions.len() as u32, 360)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let panels = root.split_evenly((1, regions.len()));
        for (panel, (beta, region)) in panels.iter().zip(regions) {
            draw_region(panel, region, config, &format!("beta = {beta}"))?;
        }
        root.present().map_err(plot_err)?;
    }
    stamp(path, hash)
}
