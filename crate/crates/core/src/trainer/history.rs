use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

/// One loss-history CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: u64,
    pub l_s: f64,
    pub l_up: f64,
    pub l_uf: f64,
    pub l_cons: f64,
    pub lambda: f64,
    pub eta: f64,
    pub total: f64,
}

impl HistoryRow {
    pub fn new(iter: u64, b: &LossBreakdown, eta: f64) -> Self {
        Self { iter, l_s: b.l_s, l_up: b.l_up, l_uf: b.l_uf, l_cons: b.l_cons, lambda: b.lambda_t, eta, total: b.total }
    }
}

pub fn write_history(path: impl AsRef<Path>, rows: &[HistoryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<HistoryRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Csv(e)
    }
}
