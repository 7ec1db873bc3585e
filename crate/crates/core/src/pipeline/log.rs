//! Per-epoch training logs: line-delimited JSON on disk, one object per
//! epoch, plus a CSV export. This format is the contract consumed by the
//! dynamics analyzer.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub run_id: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_recon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_recon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EpochRow {
    pub fn new(run_id: &str, epoch: usize, losses: (f64, f64), accs: (f64, f64)) -> Self {
        Self {
            run_id: run_id.to_string(),
            epoch,
            train_loss: losses.0,
            val_loss: losses.1,
            train_acc: accs.0,
            val_acc: accs.1,
            train_recon: None,
            train_kl: None,
            val_recon: None,
            val_kl: None,
            beta: None,
            config_hash: None,
        }
    }
}

/// An ordered, gap-free epoch series starting at 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochLog {
    pub rows: Vec<EpochRow>,
}

impl EpochLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn run_id(&self) -> Option<&str> {
        self.rows.first().map(|r| r.run_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends the next epoch. Rows must arrive as epoch 0, 1, 2, ...
    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        if row.epoch != self.rows.len() {
            return Err(Error::EpochCoverage(format!(
                "expected epoch {}, got {}",
                self.rows.len(),
                row.epoch
            )));
        }
        for (name, acc) in [("train_acc", row.train_acc), ("val_acc", row.val_acc)] {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::InvalidConfig(format!(
                    "{name} {acc} outside [0,1] at epoch {}",
                    row.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn train_loss_series(&self) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.epoch, r.train_loss)).collect()
    }

    pub fn val_loss_series(&self) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.epoch, r.val_loss)).collect()
    }

    pub fn train_acc_series(&self) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.epoch, r.train_acc)).collect()
    }

    pub fn val_acc_series(&self) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.epoch, r.val_acc)).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parses a line-delimited log, reporting 1-based line numbers on
    /// malformed lines and enforcing the gap-free epoch contract.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut log = EpochLog::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: EpochRow = serde_json::from_str(line).map_err(|e| Error::MalformedLog {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            log.push(row).map_err(|e| Error::MalformedLog {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(log)
    }

    /// CSV export with a header row; full float precision so round-trips
    /// and determinism comparisons stay exact.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("run_id,epoch,train_loss,val_loss,train_acc,val_acc\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.run_id, r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize) -> EpochRow {
        let mut r = EpochRow::new("r1", epoch, (0.5 - epoch as f64 * 0.01, 0.6), (0.4, 0.35));
        r.beta = Some(0.25);
        r.config_hash = Some("abc".into());
        r
    }

    #[test]
    fn push_enforces_contiguity_and_acc_range() {
        let mut log = EpochLog::new();
        log.push(row(0)).unwrap();
        assert!(matches!(log.push(row(2)), Err(Error::EpochCoverage(_))));
        let mut bad = row(1);
        bad.val_acc = 1.5;
        assert!(log.push(bad).is_err());
        log.push(row(1)).unwrap();
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn jsonl_roundtrip_preserves_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut log = EpochLog::new();
        for e in 0..5 {
            log.push(row(e)).unwrap();
        }
        log.write_jsonl(&path).unwrap();
        let back = EpochLog::read_jsonl(&path).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn malformed_line_is_reported_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let good = serde_json::to_string(&row(0)).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        match EpochLog::read_jsonl(&path) {
            Err(Error::MalformedLog { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed-log error, got {other:?}"),
        }
    }

    #[test]
    fn epoch_gap_is_reported_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let a = serde_json::to_string(&row(0)).unwrap();
        let b = serde_json::to_string(&row(2)).unwrap();
        std::fs::write(&path, format!("{a}\n{b}\n")).unwrap();
        match EpochLog::read_jsonl(&path) {
            Err(Error::MalformedLog { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("expected epoch 1"));
            }
            other => panic!("expected malformed-log error, got {other:?}"),
        }
    }

    #[test]
    fn csv_has_header_and_one_line_per_epoch() {
        let mut log = EpochLog::new();
        for e in 0..3 {
            log.push(row(e)).unwrap();
        }
        let csv = log.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "run_id,epoch,train_loss,val_loss,train_acc,val_acc"
        );
        assert!(lines[1].starts_with("r1,0,"));
    }

    #[test]
    fn extra_fields_survive_jsonl_but_stay_optional() {
        let line = r#"{"run_id":"x","epoch":0,"train_loss":1.0,"val_loss":1.1,"train_acc":0.3,"val_acc":0.3}"#;
        let r: EpochRow = serde_json::from_str(line).unwrap();
        assert_eq!(r.beta, None);
        let ser = serde_json::to_string(&r).unwrap();
        assert!(!ser.contains("beta"));
    }
}
