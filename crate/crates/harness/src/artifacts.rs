//! On-disk layout of a run directory:
//!
//! ```text
//! <runs_root>/<run_id>/
//!   config.toml            the run's config
//!   manifest.json          stage progress, seeds, failure record
//!   metrics.csv            one row per MetricsRow
//!   labels.jsonl           preference records
//!   checkpoints/<stage>-<epoch>.cbor
//!   reports/               region, skill report, trajectories, visited states
//!   plots/                 SVG figures
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Bumped whenever a checkpoint payload changes shape.
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Exploration,
    Discovery,
    Skills,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Exploration, Stage::Discovery, Stage::Skills];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Exploration => "exploration",
            Stage::Discovery => "discovery",
            Stage::Skills => "skills",
        }
    }

    pub fn index(&self) -> u64 {
        *self as u64
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletedStage {
    pub stage: Stage,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    /// Seed of each stage's generator, derived from the run seed.
    pub stage_seeds: BTreeMap<Stage, u64>,
    pub completed: Vec<CompletedStage>,
    pub failure: Option<StageFailure>,
}

impl RunManifest {
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.completed.iter().any(|c| c.stage == stage)
    }

    pub fn checkpoint_of(&self, stage: Stage) -> Option<&str> {
        self.completed.iter().find(|c| c.stage == stage).map(|c| c.checkpoint.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = Self::new(root);
        for sub in ["checkpoints", "reports", "plots"] {
            std::fs::create_dir_all(dir.root.join(sub))?;
        }
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.jsonl")
    }

    pub fn checkpoint(&self, stage: Stage, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}-{epoch}.cbor"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: u32,
    config_hash: String,
    stage: Stage,
    epoch: usize,
    payload: T,
}

#[derive(Deserialize)]
struct Header {
    format: u32,
    config_hash: String,
}

pub fn write_checkpoint<T: Serialize>(path: &Path, config_hash: &str, stage: Stage, epoch: usize, payload: &T) -> Result<()> {
    let tmp = path.with_extension("cbor.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let env = Envelope { format: CHECKPOINT_FORMAT, config_hash: config_hash.to_string(), stage, epoch, payload };
        ciborium::into_writer(&env, &mut w).map_err(|e| corrupt(path, e))?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, rejecting ones written by a different config or
/// format version.
pub fn read_checkpoint<T: DeserializeOwned>(path: &Path, config_hash: &str) -> Result<T> {
    let header: Header = ciborium::from_reader(BufReader::new(File::open(path)?)).map_err(|e| corrupt(path, e))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(corrupt(path, format!("format {} (expected {CHECKPOINT_FORMAT})", header.format)));
    }
    check_hash(path, config_hash, &header.config_hash)?;
    let env: Envelope<T> = ciborium::from_reader(BufReader::new(File::open(path)?)).map_err(|e| corrupt(path, e))?;
    Ok(env.payload)
}

pub fn check_hash(path: &Path, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(HarnessError::HashMismatch {
            path: path.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn corrupt(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Corrupt { path: path.display().to_string(), reason: e.to_string() }
}

/// JSON artifact stamped with the config hash.
#[derive(Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, config_hash: &str, body: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(&Stamped { config_hash: config_hash.to_string(), body })?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, config_hash: &str) -> Result<T> {
    let stamped: Stamped<T> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    check_hash(path, config_hash, &stamped.config_hash)?;
    Ok(stamped.body)
}

pub fn write_manifest(dir: &RunDir, manifest: &RunManifest) -> Result<()> {
    let tmp = dir.manifest().with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(manifest)? + "\n")?;
    std::fs::rename(tmp, dir.manifest())?;
    Ok(())
}

pub fn read_manifest(dir: &RunDir) -> Result<RunManifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.manifest())?)?)
}

/// One metrics line: a stage, an epoch within it, and named values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: Stage,
    pub epoch: usize,
    pub values: BTreeMap<String, f64>,
}

impl MetricsRow {
    pub fn new(stage: Stage, epoch: usize) -> Self {
        Self { stage, epoch, values: BTreeMap::new() }
    }

    pub fn set(&mut self, name: impl Into<String>, value: f64) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

/// Rejects rows that go back in epoch within a stage.
pub fn check_monotone(rows: &[MetricsRow]) -> Result<()> {
    let mut last: BTreeMap<Stage, usize> = BTreeMap::new();
    for r in rows {
        if let Some(&prev) = last.get(&r.stage) {
            if r.epoch < prev {
                return Err(HarnessError::Input(format!(
                    "metrics for stage {} go back from epoch {prev} to {}",
                    r.stage, r.epoch
                )));
            }
        }
        last.insert(r.stage, r.epoch);
    }
    Ok(())
}

/// Writes every row as wide CSV: `config_hash, stage, epoch`, then the sorted
/// union of metric names. Missing values are empty cells.
pub fn write_metrics_csv(path: &Path, config_hash: &str, rows: &[MetricsRow]) -> Result<()> {
    check_monotone(rows)?;
    let names: BTreeSet<&String> = rows.iter().flat_map(|r| r.values.keys()).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["config_hash".to_string(), "stage".into(), "epoch".into()];
    header.extend(names.iter().map(|n| n.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![config_hash.to_string(), r.stage.to_string(), r.epoch.to_string()];
        rec.extend(names.iter().map(|n| r.values.get(*n).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path, config_hash: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        check_hash(path, config_hash, &rec[0])?;
        let stage: Stage = serde_json::from_value(serde_json::Value::String(rec[1].to_string()))?;
        let epoch = rec[2].parse().map_err(|e| corrupt(path, e))?;
        let mut row = MetricsRow::new(stage, epoch);
        for (name, cell) in header.iter().zip(rec.iter()).skip(3) {
            if !cell.is_empty() {
                row.set(name, cell.parse::<f64>().map_err(|e| corrupt(path, e))?);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cbor");
        write_checkpoint(&path, "abc", Stage::Discovery, 3, &vec![1.5f64, 2.5]).unwrap();
        let back: Vec<f64> = read_checkpoint(&path, "abc").unwrap();
        assert_eq!(back, vec![1.5, 2.5]);
        assert!(matches!(read_checkpoint::<Vec<f64>>(&path, "zzz"), Err(HarnessError::HashMismatch { .. })));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut a = MetricsRow::new(Stage::Exploration, 0);
        a.set("return", 0.1).set("loss", 2.0);
        let mut b = MetricsRow::new(Stage::Skills, 1);
        b.set("near", 8.0);
        write_metrics_csv(&path, "h", &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_metrics_csv(&path, "h").unwrap(), vec![a.clone(), b]);
        let back_in_time = [MetricsRow::new(Stage::Exploration, 2), a];
        assert!(write_metrics_csv(&path, "h", &back_in_time).is_err());
    }
}
