use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_supervised: f64,
    pub train_unsupervised: f64,
    pub val_bacc: f64,
    pub val_unlabeled_entropy: f64,
    pub significant: bool,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Per-epoch records, optionally mirrored to a JSON-lines file.
#[derive(Debug, Default)]
pub struct RunLog {
    path: Option<PathBuf>,
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        RunLog::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: impl AsRef<Path>) -> Self {
        RunLog {
            path: Some(path.as_ref().to_path_buf()),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.iter().rev().find(|r| r.fold == rec.fold) {
            if rec.epoch <= last.epoch {
                return Err(Error::InvalidInput(format!(
                    "run log epoch {} after {} in fold {}",
                    rec.epoch, last.epoch, rec.fold
                )));
            }
        }
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        BufReader::new(f)
            .lines()
            .map(|l| {
                let l = l.map_err(|e| Error::io(path, e))?;
                Ok(serde_json::from_str(&l)?)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize) -> EpochRecord {
        EpochRecord {
            fold: 0,
            epoch,
            train_loss: 1.0,
            train_supervised: 0.9,
            train_unsupervised: 0.1,
            val_bacc: 0.5,
            val_unlabeled_entropy: 1.2,
            significant: true,
            wall_time_s: 0.0,
            seed: 3,
            config_hash: "h".into(),
        }
    }

    #[test]
    fn json_lines_round_trip_and_monotone_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let mut log = RunLog::to_file(&p);
        log.push(rec(0)).unwrap();
        log.push(rec(1)).unwrap();
        assert!(log.push(rec(1)).is_err());
        assert_eq!(RunLog::read(&p).unwrap(), vec![rec(0), rec(1)]);
    }
}
