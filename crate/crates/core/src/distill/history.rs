//! Per-step loss records and their CSV form.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub focus: f64,
    pub output: f64,
    pub integrated: f64,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_focus: f64,
    pub mean_output: f64,
    pub mean_integrated: f64,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub num_focus: usize,
    pub rows: Vec<HistoryRow>,
}

impl LossHistory {
    pub fn new(num_focus: usize) -> Self {
        LossHistory {
            num_focus,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "step", "L_P", "L_output", "L_integrated"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((1..=self.num_focus).map(|i| format!("alpha_{i}")));
        h
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.integrated)
    }

    pub fn final_epoch_mean(&self) -> Option<f64> {
        self.epoch_summaries().last().map(|e| e.mean_integrated)
    }

    pub fn epoch_summaries(&self) -> Vec<EpochSummary> {
        let mut out: Vec<EpochSummary> = Vec::new();
        for row in &self.rows {
            match out.last_mut() {
                Some(e) if e.epoch == row.epoch => {
                    e.steps += 1;
                    e.mean_focus += row.focus;
                    e.mean_output += row.output;
                    e.mean_integrated += row.integrated;
                }
                _ => out.push(EpochSummary {
                    epoch: row.epoch,
                    steps: 1,
                    mean_focus: row.focus,
                    mean_output: row.output,
                    mean_integrated: row.integrated,
                    alphas: row.alphas.clone(),
                }),
            }
        }
        for e in &mut out {
            let n = e.steps as f64;
            e.mean_focus /= n;
            e.mean_output /= n;
            e.mean_integrated /= n;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let fail = |e: csv::Error| Error::Format(format!("loss history csv: {e}"));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header()).map_err(fail)?;
        for r in &self.rows {
            let mut rec = vec![
                r.epoch.to_string(),
                r.step.to_string(),
                r.focus.to_string(),
                r.output.to_string(),
                r.integrated.to_string(),
            ];
            rec.extend(r.alphas.iter().map(f64::to_string));
            w.write_record(&rec).map_err(fail)?;
        }
        w.flush().map_err(|e| Error::Format(format!("loss history csv: {e}")))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}
