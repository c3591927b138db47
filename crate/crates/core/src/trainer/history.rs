use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Head only, on frozen-backbone features.
    Head,
    /// Backbone tail and head together.
    FineTune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Head => "head",
            Stage::FineTune => "fine_tune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across both stages.
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// Every field except wall time, as raw bits.
    fn metric_bits(&self) -> (usize, Stage, u64, u64, Option<u64>, Option<u64>) {
        (
            self.epoch,
            self.stage,
            self.train_loss.to_bits(),
            self.train_acc.to_bits(),
            self.val_loss.map(f64::to_bits),
            self.val_acc.map(f64::to_bits),
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// Index of the first fine-tuning record (the number of head epochs).
    pub fn boundary(&self) -> usize {
        self.records
            .iter()
            .position(|r| r.stage == Stage::FineTune)
            .unwrap_or(self.records.len())
    }

    pub fn stage_seconds(&self, stage: Stage) -> f64 {
        self.stage(stage).map(|r| r.seconds).sum()
    }

    pub fn last(&self, stage: Stage) -> Option<&EpochRecord> {
        self.stage(stage).last()
    }

    pub fn extend(&mut self, other: TrainHistory) {
        self.records.extend(other.records);
    }

    /// Bitwise equality of all metrics, ignoring wall-clock time.
    pub fn same_metrics(&self, other: &TrainHistory) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.metric_bits() == b.metric_bits())
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{}", serde_json::to_string(r).expect("plain record"));
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: EpochRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("history line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(TrainHistory { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
