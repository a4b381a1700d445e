use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FanError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Source,
    Target,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Source => "source",
            Stage::Target => "target",
        })
    }
}

/// One optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub losses: BTreeMap<String, f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_accuracy: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    pub elapsed_secs: f64,
}

/// Per-step training records in step order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; steps must strictly increase.
    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(FanError::Invariant(format!(
                    "log step {} does not follow {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_step(&self) -> Option<usize> {
        self.records.last().map(|r| r.step)
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// Concatenates two logs, renumbering `other` to follow this one.
    pub fn extend(&mut self, other: &TrainLog) -> Result<()> {
        let offset = self.last_step().map_or(0, |s| s + 1);
        for r in &other.records {
            let mut r = r.clone();
            r.step += offset;
            self.push(r)?;
        }
        Ok(())
    }

    /// Exponential moving average of `key` over a stage, with smoothing
    /// `2 / (window + 1)`. Returns `(epoch, value)` at each epoch's last step.
    pub fn epoch_ema(&self, stage: Stage, key: &str, window: usize) -> Vec<(usize, f32)> {
        let a = 2.0 / (window as f64 + 1.0);
        let mut ema: Option<f64> = None;
        let mut out: Vec<(usize, f32)> = Vec::new();
        for r in self.stage(stage) {
            let Some(&v) = r.losses.get(key) else { continue };
            let e = match ema {
                None => v as f64,
                Some(prev) => prev + a * (v as f64 - prev),
            };
            ema = Some(e);
            match out.last_mut() {
                Some(last) if last.0 == r.epoch => last.1 = e as f32,
                _ => out.push((r.epoch, e as f32)),
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).map_err(|e| FanError::Format(e.to_string()))?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| FanError::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| FanError::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<TrainLog> {
        let text = fs::read_to_string(path).map_err(|e| FanError::io(path, e))?;
        let mut log = TrainLog::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: LogRecord = serde_json::from_str(line)
                .map_err(|e| FanError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            log.push(r)?;
        }
        Ok(log)
    }
}
