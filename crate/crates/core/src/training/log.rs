//! Training logs: one CSV row per optimizer step and one per validation pass.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::dataset::csv_err;
use crate::error::{Error, Result};

pub const STEP_HEADER: [&str; 9] = [
    "epoch",
    "step",
    "total",
    "contrastive",
    "cos_T",
    "cos_I",
    "anchor",
    "tau_loss",
    "tau_agg",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRow {
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub contrastive: f64,
    #[serde(rename = "cos_T")]
    pub cos_t: Option<f64>,
    #[serde(rename = "cos_I")]
    pub cos_i: Option<f64>,
    pub anchor: Option<f64>,
    pub tau_loss: f64,
    pub tau_agg: Option<f64>,
}

/// Validation pass after `epoch` epochs; epoch 0 is before any update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub step: u64,
    pub val_loss: f64,
    #[serde(rename = "val_cos_I")]
    pub val_cos_i: Option<f64>,
    pub val_t2i_r1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
}

impl TrainLog {
    pub fn push_step(&mut self, row: StepRow) {
        debug_assert!(self.steps.last().is_none_or(|l| (l.epoch, l.step) < (row.epoch, row.step)));
        self.steps.push(row);
    }

    pub fn push_epoch(&mut self, row: EpochRow) {
        debug_assert!(self.epochs.last().is_none_or(|l| l.epoch < row.epoch));
        self.epochs.push(row);
    }

    pub fn first_val(&self) -> Option<&EpochRow> {
        self.epochs.first()
    }

    pub fn last_val(&self) -> Option<&EpochRow> {
        self.epochs.last()
    }

    pub fn steps_csv(&self) -> Result<String> {
        to_csv(&self.steps, &STEP_HEADER)
    }

    pub fn epochs_csv(&self) -> Result<String> {
        to_csv(&self.epochs, &["epoch", "step", "val_loss", "val_cos_I", "val_t2i_r1"])
    }

    /// Writes `path` (step rows) and `<stem>_val.csv` beside it (epoch rows).
    /// Returns the second path.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("log");
        let val = path.with_file_name(format!("{stem}_val.csv"));
        std::fs::write(path, self.steps_csv()?).map_err(|e| Error::io(path, e))?;
        std::fs::write(&val, self.epochs_csv()?).map_err(|e| Error::io(&val, e))?;
        Ok(val)
    }
}

fn to_csv<R: Serialize>(rows: &[R], header: &[&str]) -> Result<String> {
    let here = Path::new("<log>");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_err(here, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(here, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::input(format!("log buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_empty_fields() {
        let mut log = TrainLog::default();
        log.push_step(StepRow {
            epoch: 1,
            step: 1,
            total: 0.5,
            contrastive: 0.5,
            cos_t: None,
            cos_i: Some(0.25),
            anchor: None,
            tau_loss: 0.07,
            tau_agg: Some(0.07),
        });
        let csv = log.steps_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,step,total,contrastive,cos_T,cos_I,anchor,tau_loss,tau_agg");
        assert_eq!(lines.next().unwrap(), "1,1,0.5,0.5,,0.25,,0.07,0.07");
        assert!(log.epochs_csv().unwrap().starts_with("epoch,step,val_loss"));
    }
}
