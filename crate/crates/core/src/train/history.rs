//! Per-epoch training history and its CSV form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean negated ELBO per training simulation.
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,loss,recon,kl,val_acc,seconds";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record(HISTORY_HEADER.split(',')).expect("in-memory write");
        }
        for r in &self.records {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is UTF-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r
            .headers()
            .map_err(|e| Error::format(0, format!("history header: {e}")))?;
        if header.iter().collect::<Vec<_>>().join(",") != HISTORY_HEADER {
            return Err(Error::format(0, format!("history header must be {HISTORY_HEADER}")));
        }
        let mut records = Vec::new();
        for row in r.deserialize() {
            let row: EpochRecord = row.map_err(|e| {
                let offset = e.position().map_or(0, |p| p.byte());
                Error::format(offset, format!("history row: {e}"))
            })?;
            records.push(row);
        }
        Ok(Self { records })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}
