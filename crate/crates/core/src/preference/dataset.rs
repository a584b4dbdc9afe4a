use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::envs::{EnvState, OracleReward};
use crate::error::{Error, Result};

/// Sums closer than this are treated as a tie and labelled [`Label::Skip`].
pub const TIE_EPSILON: f64 = 1e-9;

/// A fixed-length window of visited states cut from one stored episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub episode: u64,
    pub offset: usize,
    pub states: Vec<EnvState>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Two segments shown side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub first: Segment,
    pub second: Segment,
}

impl PreferencePair {
    pub fn swapped(&self) -> Self {
        Self { first: self.second.clone(), second: self.first.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    /// `y = (1, 0)`: the first segment is preferred.
    First,
    /// `y = (0, 1)`.
    Second,
    Skip,
}

impl Label {
    /// Target distribution `(y0, y1)`, or `None` for skipped pairs.
    pub fn target(self) -> Option<(f64, f64)> {
        match self {
            Label::First => Some((1.0, 0.0)),
            Label::Second => Some((0.0, 1.0)),
            Label::Skip => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeler {
    Oracle,
    Human,
}

/// One line of the dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub pair_id: String,
    #[serde(flatten)]
    pub pair: PreferencePair,
    pub label: Label,
    pub labeler: Labeler,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl PreferenceRecord {
    pub fn new(pair_id: impl Into<String>, pair: PreferencePair, label: Label, labeler: Labeler) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        Self { pair_id: pair_id.into(), pair, label, labeler, timestamp }
    }
}

/// Labels a pair by comparing summed oracle rewards.
pub fn oracle_label(pair: &PreferencePair, oracle: &OracleReward) -> Label {
    let gap = oracle.total(&pair.first.states) - oracle.total(&pair.second.states);
    if gap.abs() < TIE_EPSILON {
        Label::Skip
    } else if gap > 0.0 {
        Label::First
    } else {
        Label::Second
    }
}

/// Append-only collection of labelled pairs, optionally mirrored to a
/// line-delimited JSON file.
#[derive(Clone, Debug)]
pub struct PreferenceDataset {
    records: Vec<PreferenceRecord>,
    holdout_fraction: f64,
    file: Option<PathBuf>,
    /// Bytes of the backing file already folded into `records`.
    read_offset: u64,
}

impl PreferenceDataset {
    pub fn new(holdout_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&holdout_fraction) {
            return Err(Error::config(format!("holdout fraction {holdout_fraction} must lie in [0, 1)")));
        }
        Ok(Self { records: Vec::new(), holdout_fraction, file: None, read_offset: 0 })
    }

    /// Opens (or creates) a dataset file and loads every complete record in it.
    pub fn open(path: impl AsRef<Path>, holdout_fraction: f64) -> Result<Self> {
        let mut ds = Self::new(holdout_fraction)?;
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        OpenOptions::new().create(true).append(true).open(&path)?;
        ds.file = Some(path);
        ds.reload()?;
        Ok(ds)
    }

    /// Picks up records appended to the backing file by another writer.
    /// Returns the number of new records.
    pub fn reload(&mut self) -> Result<usize> {
        let Some(path) = &self.file else { return Ok(0) };
        let mut f = File::open(path)?;
        f.seek(SeekFrom::Start(self.read_offset))?;
        let mut reader = BufReader::new(f);
        let mut added = 0;
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            // A line without its newline is still being written.
            if n == 0 || !line.ends_with('\n') {
                break;
            }
            self.read_offset += n as u64;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let record: PreferenceRecord = serde_json::from_str(trimmed)?;
            self.records.push(record);
            added += 1;
        }
        Ok(added)
    }

    pub fn push(&mut self, record: PreferenceRecord) -> Result<()> {
        if record.pair.first.len() != record.pair.second.len() || record.pair.first.is_empty() {
            return Err(Error::input(format!("pair {} has mismatched or empty segments", record.pair_id)));
        }
        if let Some(path) = &self.file {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            let mut f = OpenOptions::new().append(true).open(path)?;
            f.write_all(line.as_bytes())?;
            self.read_offset += line.len() as u64;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn holdout_fraction(&self) -> f64 {
        self.holdout_fraction
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_deref()
    }

    pub fn contains_id(&self, pair_id: &str) -> bool {
        self.records.iter().any(|r| r.pair_id == pair_id)
    }

    /// Non-skip records, split deterministically by position into
    /// `(train, holdout)`. Holdout records are spread evenly through the
    /// sequence so the split is stable as the dataset grows.
    pub fn split(&self) -> (Vec<&PreferenceRecord>, Vec<&PreferenceRecord>) {
        let usable: Vec<&PreferenceRecord> = self.records.iter().filter(|r| r.label != Label::Skip).collect();
        let f = self.holdout_fraction;
        let mut train = Vec::new();
        let mut holdout = Vec::new();
        for (i, r) in usable.into_iter().enumerate() {
            let before = (i as f64 * f).floor();
            let after = ((i + 1) as f64 * f).floor();
            if after > before {
                holdout.push(r);
            } else {
                train.push(r);
            }
        }
        (train, holdout)
    }
}
