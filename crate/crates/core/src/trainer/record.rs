use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use super::optimizer::OptimizerSpec;
use super::train::{InstrumentConfig, StopConfig};
use crate::data::Provenance;
use crate::error::{Error, Result};
use crate::network::MlpConfig;

pub const RUNLOG_FORMAT_VERSION: u32 = 1;

/// Non-finite floats are written as JSON `null`; read them back as NaN.
fn nan_if_null<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFlags {
    /// `lr − η̃_crit(batch) > 1e-8` at this step.
    pub lr_exceeds_crit: bool,
    /// The update made at this step raised the full training loss.
    pub loss_increased: bool,
    /// The update made at this step produced a diverged loss.
    pub diverged: bool,
}

/// One executed update. Every loss is measured at the weights *before* the
/// update, so `train_loss` of step `t` is `L(wᵗ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    #[serde(deserialize_with = "nan_if_null")]
    pub lr: f64,
    pub train_loss: Option<f64>,
    #[serde(deserialize_with = "nan_if_null")]
    pub batch_loss: f64,
    pub eta_crit_batch: Option<f64>,
    pub spectral_norm_full: Option<f64>,
    pub loss_top: Option<f64>,
    pub loss_rest: Option<f64>,
    pub validation_loss: Option<f64>,
    pub flags: EventFlags,
    /// Dataset row indices of the batch, when batch recording is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_indices: Option<Vec<usize>>,
}

impl StepRecord {
    /// `n/‖K‖₂` on the full training set, when the norm was measured.
    pub fn eta_crit_full(&self, n_train: usize) -> Option<f64> {
        self.spectral_norm_full
            .map(|norm| crate::kernel::critical_lr_from_norm(n_train, norm))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Converged,
    MaxIters,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalRecord {
    pub status: TerminalStatus,
    /// Number of executed updates.
    pub iterations: usize,
    #[serde(deserialize_with = "nan_if_null")]
    pub final_train_loss: f64,
    pub final_validation_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub sampler: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format_version: u32,
    pub model: MlpConfig,
    pub optimizer: OptimizerSpec,
    pub instrument: InstrumentConfig,
    pub stop: StopConfig,
    pub provenance: Provenance,
    pub n_train: usize,
    pub seeds: Seeds,
    /// Free-form echo supplied by the caller (e.g. the experiment config).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub steps: Vec<StepRecord>,
    pub terminal: TerminalRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Header(Box<RunHeader>),
    Step(StepRecord),
    Terminal(TerminalRecord),
}

const CSV_COLUMNS: [&str; 12] = [
    "iteration",
    "lr",
    "train_loss",
    "batch_loss",
    "eta_crit_batch",
    "spectral_norm_full",
    "loss_top",
    "loss_rest",
    "validation_loss",
    "lr_exceeds_crit",
    "loss_increased",
    "diverged",
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

impl RunLog {
    pub fn status(&self) -> TerminalStatus {
        self.terminal.status
    }

    /// `L(w^{t+1})` for step index `i`: the next record's loss, or the final
    /// loss after the last record.
    pub fn loss_after(&self, i: usize) -> Option<f64> {
        match self.steps.get(i + 1) {
            Some(next) => next.train_loss,
            None if i + 1 == self.steps.len() => Some(self.terminal.final_train_loss),
            None => None,
        }
    }

    /// Training losses `L⁰, L¹, …, L^T` including the final one.
    pub fn loss_curve(&self) -> Vec<Option<f64>> {
        let mut v: Vec<Option<f64>> = self.steps.iter().map(|s| s.train_loss).collect();
        v.push(Some(self.terminal.final_train_loss));
        v
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |line: &LogLine| -> Result<()> {
            out.push_str(&serde_json::to_string(line)?);
            out.push('\n');
            Ok(())
        };
        push(&LogLine::Header(Box::new(self.header.clone())))?;
        for s in &self.steps {
            push(&LogLine::Step(s.clone()))?;
        }
        push(&LogLine::Terminal(self.terminal.clone()))?;
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut steps = Vec::new();
        let mut terminal = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
            match parsed {
                LogLine::Header(h) => header = Some(*h),
                LogLine::Step(s) => steps.push(s),
                LogLine::Terminal(t) => terminal = Some(t),
            }
        }
        let missing = |what: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("run log has no {what} line"),
        };
        Ok(Self {
            header: header.ok_or_else(|| missing("header"))?,
            steps,
            terminal: terminal.ok_or_else(|| missing("terminal"))?,
        })
    }

    /// One row per step with the JSONL field names as columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(CSV_COLUMNS).map_err(io)?;
        for s in &self.steps {
            w.write_record([
                s.iteration.to_string(),
                format!("{:?}", s.lr),
                cell(s.train_loss),
                format!("{:?}", s.batch_loss),
                cell(s.eta_crit_batch),
                cell(s.spectral_norm_full),
                cell(s.loss_top),
                cell(s.loss_rest),
                cell(s.validation_loss),
                s.flags.lr_exceeds_crit.to_string(),
                s.flags.loss_increased.to_string(),
                s.flags.diverged.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
