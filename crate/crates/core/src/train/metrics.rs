use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged step. Columns a stage does not produce are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub mean_reward: Option<f64>,
    pub mean_kl: Option<f64>,
    pub mean_oracle_quality: Option<f64>,
}

impl MetricsRow {
    pub fn loss_only(step: usize, loss: f64) -> Self {
        MetricsRow {
            step,
            loss,
            mean_reward: None,
            mean_kl: None,
            mean_oracle_quality: None,
        }
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wtr.write_record(["step", "loss", "mean_reward", "mean_kl", "mean_oracle_quality"])?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let expected = ["step", "loss", "mean_reward", "mean_kl", "mean_oracle_quality"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse(format!("unexpected metrics header {headers:?}")));
    }
    rdr.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("metrics row: {e}"))))
        .collect()
}
