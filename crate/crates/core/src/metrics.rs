//! Per-epoch training log, CSV export and run summaries.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_VERSION_LINE: &str = "# ensnet metrics v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub alpha: f64,
    pub train_loss_base: f64,
    pub train_loss_subnets: Vec<f64>,
    pub test_err_base: f64,
    pub test_err_subnets: Vec<f64>,
    pub test_err_ensemble: f64,
    /// Not exported to CSV so the file stays byte-deterministic.
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    rows: Vec<EpochRecord>,
    best: Option<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoterSummary {
    pub name: String,
    pub final_error: f64,
    pub best_error: f64,
    pub best_epoch: usize,
}

/// Final and best-epoch errors, for the run's `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub epochs: usize,
    pub final_ensemble_error: f64,
    pub best_ensemble_error: f64,
    pub best_epoch: usize,
    pub voters: Vec<VoterSummary>,
    pub wall_seconds: f64,
}

fn check_rate(what: &str, r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what} error rate {r} outside [0, 1]")))
    }
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[EpochRecord] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last_epoch(&self) -> usize {
        self.rows.last().map_or(0, |r| r.epoch)
    }

    /// `(epoch, error)` of the lowest ensemble error so far; earliest epoch
    /// on ties.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn append_epoch(&mut self, record: EpochRecord) -> Result<()> {
        if record.epoch != self.last_epoch() + 1 {
            return Err(Error::Contract(format!(
                "epoch {} appended after epoch {}",
                record.epoch,
                self.last_epoch()
            )));
        }
        if let Some(first) = self.rows.first() {
            if first.test_err_subnets.len() != record.test_err_subnets.len()
                || first.train_loss_subnets.len() != record.train_loss_subnets.len()
            {
                return Err(Error::Contract("subnet count changed between epochs".into()));
            }
        }
        check_rate("base", record.test_err_base)?;
        check_rate("ensemble", record.test_err_ensemble)?;
        for &e in &record.test_err_subnets {
            check_rate("subnet", e)?;
        }
        if self.best.map_or(true, |(_, b)| record.test_err_ensemble < b) {
            self.best = Some((record.epoch, record.test_err_ensemble));
        }
        self.rows.push(record);
        Ok(())
    }

    pub fn csv_header(k: usize) -> String {
        let mut cols = vec!["epoch".to_string(), "alpha".into(), "train_loss_base".into()];
        cols.extend((0..k).map(|i| format!("train_loss_subnet{i}")));
        cols.push("test_err_base".into());
        cols.extend((0..k).map(|i| format!("test_err_subnet{i}")));
        cols.push("test_err_ensemble".into());
        cols.join(",")
    }

    /// The version comment, the header row, then one row per epoch. Floats
    /// use Rust's shortest round-trip formatting, which never depends on
    /// the locale.
    pub fn to_csv(&self) -> Result<String> {
        let first = self
            .rows
            .first()
            .ok_or_else(|| Error::Contract("cannot export an empty metrics log".into()))?;
        let mut out = format!("{CSV_VERSION_LINE}\n{}\n", Self::csv_header(first.test_err_subnets.len()));
        for r in &self.rows {
            write!(out, "{},{},{}", r.epoch, r.alpha, r.train_loss_base).unwrap();
            for l in &r.train_loss_subnets {
                write!(out, ",{l}").unwrap();
            }
            write!(out, ",{}", r.test_err_base).unwrap();
            for e in &r.test_err_subnets {
                write!(out, ",{e}").unwrap();
            }
            writeln!(out, ",{}", r.test_err_ensemble).unwrap();
        }
        Ok(out)
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Parse a file written by [`Self::export_csv`]. `wall_seconds` is not
    /// stored in the CSV and comes back as zero.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Contract(format!("metrics csv: {msg}"));
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let k = header.split(',').filter(|c| c.starts_with("test_err_subnet")).count();
        if header != Self::csv_header(k) {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut log = MetricsLog::new();
        for line in lines {
            let f: Vec<f64> = line
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}"))))
                .collect::<Result<_>>()?;
            if f.len() != 2 * k + 5 {
                return Err(bad(format!("row has {} fields, expected {}", f.len(), 2 * k + 5)));
            }
            log.append_epoch(EpochRecord {
                epoch: f[0] as usize,
                alpha: f[1],
                train_loss_base: f[2],
                train_loss_subnets: f[3..3 + k].to_vec(),
                test_err_base: f[3 + k],
                test_err_subnets: f[4 + k..4 + 2 * k].to_vec(),
                test_err_ensemble: f[4 + 2 * k],
                wall_seconds: 0.0,
            })?;
        }
        Ok(log)
    }

    pub fn summary(&self) -> Result<Summary> {
        let last = self
            .rows
            .last()
            .ok_or_else(|| Error::Contract("no epochs to summarize".into()))?;
        let (best_epoch, best_ensemble_error) = self.best.expect("nonempty log has a best row");
        let k = last.test_err_subnets.len();
        let voter = |name: String, err: &dyn Fn(&EpochRecord) -> f64| {
            let (best_epoch, best_error) = self
                .rows
                .iter()
                .map(|r| (r.epoch, err(r)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            VoterSummary {
                name,
                final_error: err(last),
                best_error,
                best_epoch,
            }
        };
        let mut voters = vec![voter("base".into(), &|r| r.test_err_base)];
        voters.extend((0..k).map(|i| voter(format!("subnet{i}"), &move |r| r.test_err_subnets[i])));
        Ok(Summary {
            epochs: last.epoch,
            final_ensemble_error: last.test_err_ensemble,
            best_ensemble_error,
            best_epoch,
            voters,
            wall_seconds: self.rows.iter().map(|r| r.wall_seconds).sum(),
        })
    }
}
