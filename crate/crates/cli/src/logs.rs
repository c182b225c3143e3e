//! CSV outputs with fixed headers: `metrics.csv`, `ranks.csv` and `timings.csv`.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

pub const METRICS_CSV: &str = "metrics.csv";
pub const RANKS_CSV: &str = "ranks.csv";
pub const TIMINGS_CSV: &str = "timings.csv";

/// One row of `metrics.csv`. Training loss and accuracy are batch means taken before
/// each step's update; validation numbers are measured after the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Ranks of the low-rank layers, separated by `;`.
    pub ranks: String,
    pub eval_params: usize,
    pub train_params: usize,
    pub eval_compression: f64,
    pub train_compression: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

pub fn join_ranks(ranks: &[usize]) -> String {
    ranks.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

pub fn split_ranks(text: &str) -> Vec<usize> {
    text.split(';').filter(|s| !s.is_empty()).map(|s| s.parse().expect("rank")).collect()
}

pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(MetricsWriter { inner: csv::Writer::from_writer(file) })
    }

    pub fn write(&mut self, record: &EpochRecord) -> Result<()> {
        self.inner.serialize(record)?;
        self.inner.flush().map_err(io_err("metrics.csv"))?;
        Ok(())
    }
}

/// `ranks.csv`: `epoch` followed by one `layer<k>` column per low-rank layer.
pub struct RanksWriter {
    inner: csv::Writer<File>,
}

impl RanksWriter {
    pub fn create(path: &Path, low_rank_layers: &[usize]) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut inner = csv::Writer::from_writer(file);
        let mut header = vec!["epoch".to_string()];
        header.extend(low_rank_layers.iter().map(|k| format!("layer{k}")));
        inner.write_record(&header)?;
        Ok(RanksWriter { inner })
    }

    pub fn write(&mut self, epoch: usize, ranks: &[usize]) -> Result<()> {
        let mut row = vec![epoch.to_string()];
        row.extend(ranks.iter().map(usize::to_string));
        self.inner.write_record(&row)?;
        self.inner.flush().map_err(io_err("ranks.csv"))?;
        Ok(())
    }
}

/// One row of `timings.csv`. `rank` is empty for the dense baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub model: String,
    pub rank: Option<usize>,
    pub batch_size: usize,
    pub step_mean_s: f64,
    pub step_std_s: f64,
    pub predict_mean_s: f64,
    pub predict_std_s: f64,
    pub predict_samples: usize,
    /// Per-sample operation count of one training step from the analytic cost model.
    pub op_count: u64,
    pub eval_params: usize,
}

pub fn write_timings(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path).map_err(io_err(path))?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_text_round_trips() {
        assert_eq!(split_ranks(&join_ranks(&[17, 25, 26])), vec![17, 25, 26]);
        assert_eq!(split_ranks(""), Vec::<usize>::new());
    }

    #[test]
    fn metrics_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_CSV);
        let rec = EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            train_accuracy: 0.8,
            val_loss: 0.4,
            val_accuracy: 0.85,
            ranks: join_ranks(&[3, 4]),
            eval_params: 10,
            train_params: 20,
            eval_compression: 0.9,
            train_compression: 0.8,
            lr: 1e-3,
            wall_time_s: 1.5,
        };
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&rec).unwrap();
        drop(w);
        assert_eq!(read_csv::<EpochRecord>(&path).unwrap(), vec![rec]);
    }
}
