//! JSON-lines records: per-step training metrics and evaluation reports.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pathflip_core::train::{Stage, StepRecord};
use serde::{Deserialize, Serialize};

use super::{io_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: Stage,
    #[serde(rename = "L_region")]
    pub l_region: f64,
    #[serde(rename = "L_i2t")]
    pub l_i2t: f64,
    #[serde(rename = "L_t2i")]
    pub l_t2i: f64,
    #[serde(rename = "L_slide")]
    pub l_slide: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "L_lm")]
    pub l_lm: f64,
    pub eta: f64,
    pub lr: f64,
}

impl From<&StepRecord> for MetricsRecord {
    fn from(r: &StepRecord) -> Self {
        let l = &r.losses;
        Self {
            step: r.step,
            stage: r.stage,
            l_region: l.l_region,
            l_i2t: l.l_i2t,
            l_t2i: l.l_t2i,
            l_slide: l.l_slide,
            l_total: l.l_total,
            l_lm: r.l_lm,
            eta: l.eta,
            lr: r.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub metric: String,
    pub value: f64,
    pub split: String,
    pub checkpoint: String,
    pub config_hash: String,
}

/// Appending JSON-lines writer.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    /// Opens for append, or truncates when `truncate` is set.
    pub fn open(path: &Path, truncate: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(!truncate)
            .write(true)
            .truncate(truncate)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn push<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn read_all<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = super::read_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| super::invalid(path, format!("line {}: {e}", i + 1))))
        .collect()
}
