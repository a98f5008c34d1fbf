//! Per-epoch training curves and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,train_loss,test_error,lr,peak_elements,wall_time_s";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: u64,
    pub train_loss: f64,
    /// Fraction in `[0, 1]`.
    pub test_error: f64,
    /// Learning rate after the epoch's last step.
    pub lr: f64,
    pub peak_elements: u64,
    pub wall_time_s: f64,
}

impl EpochRecord {
    /// Equality on every column except wall time.
    pub fn same_run(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.test_error.to_bits() == other.test_error.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
            && self.peak_elements == other.peak_elements
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricsSeries {
    pub records: Vec<EpochRecord>,
}

impl MetricsSeries {
    pub fn record(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.epoch <= last.epoch {
                return Err(Error::State(format!("epoch {} recorded after {}", rec.epoch, last.epoch)));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn same_run(&self, other: &MetricsSeries) -> bool {
        self.len() == other.len() && self.records.iter().zip(&other.records).all(|(a, b)| a.same_run(b))
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        w.write_record(CSV_HEADER.split(','))?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<csv sink>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(source);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header.join(",") != CSV_HEADER {
            return Err(Error::format("<csv>", format!("unexpected header `{}`", header.join(","))));
        }
        let mut series = MetricsSeries::default();
        for rec in r.deserialize() {
            series.record(rec?)?;
        }
        Ok(series)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: u64, x: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: x,
            test_error: x / 7.0,
            lr: 0.1 * x.cos().abs(),
            peak_elements: 1234 * epoch,
            wall_time_s: 0.25,
        }
    }

    #[test]
    fn empty_series_is_header_only() {
        let mut out = Vec::new();
        MetricsSeries::default().write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn epochs_must_increase() {
        let mut s = MetricsSeries::default();
        s.record(rec(1, 0.5)).unwrap();
        assert!(s.record(rec(1, 0.4)).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut s = MetricsSeries::default();
        for e in 1..=5 {
            s.record(rec(e, 1.0 / (e as f64 + 0.3))).unwrap();
        }
        let mut out = Vec::new();
        s.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(MetricsSeries::read_csv(out.as_slice()).unwrap(), s);
    }

    #[test]
    fn wrong_header_is_rejected() {
        let doc = "epoch,loss\n1,0.5\n";
        assert!(MetricsSeries::read_csv(doc.as_bytes()).is_err());
    }
}
