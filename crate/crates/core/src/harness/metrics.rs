use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::training::{CurvePoint, WindowReport};
use crate::{to_db, Error, Result};

/// An MSE in dB; `zero_error` marks the `−∞` case of estimates equal to the
/// truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseDb {
    pub db: f64,
    pub zero_error: bool,
}

/// Squared error averaged over trajectories, time and state components.
pub fn mse_linear(estimates: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::dim("mse trajectories", truth.len(), estimates.len()));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for (e, x) in estimates.iter().zip(truth) {
        if e.shape() != x.shape() {
            return Err(Error::dim("mse trajectory entries", x.len(), e.len()));
        }
        sq += (e - x).norm_squared();
        count += e.len();
    }
    if count == 0 {
        return Err(Error::InvalidArgument("mse of an empty set".into()));
    }
    Ok(sq / count as f64)
}

/// `10·log10` of [`mse_linear`].
pub fn mse_db(estimates: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<MseDb> {
    let mse = mse_linear(estimates, truth)?;
    Ok(MseDb {
        db: to_db(mse),
        zero_error: mse == 0.0,
    })
}

/// Identifies the run that produced a CSV file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvMeta {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub inv_r2_db: f64,
    pub nu_db: f64,
    pub estimator: String,
    pub mse_db: f64,
    pub zero_error: bool,
    /// Wall-clock inference time per trajectory.
    pub runtime_s: f64,
    pub t: usize,
    pub n: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn find(&self, inv_r2_db: f64, estimator: &str, t: usize) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.inv_r2_db == inv_r2_db && r.estimator == estimator && r.t == t)
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv<W: Write>(&self, out: &mut W, meta: &CsvMeta) -> Result<()> {
        let io = |e| Error::io("<csv>", e);
        writeln!(out, "config_hash,seed,inv_r2_db,nu_db,estimator,T,N,mse_db,zero_error,runtime_s,error").map_err(io)?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{:.6},{}",
                meta.config_hash,
                meta.seed,
                r.inv_r2_db,
                r.nu_db,
                r.estimator,
                r.t,
                r.n,
                r.mse_db,
                r.zero_error,
                r.runtime_s,
                r.error.as_deref().unwrap_or("").replace(',', ";")
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One learning curve per `(label, inv_r2_db)` pair.
pub fn write_curves_csv<W: Write>(out: &mut W, meta: &CsvMeta, curves: &[(String, f64, &[CurvePoint])]) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    writeln!(out, "config_hash,seed,run,inv_r2_db,epoch,train_loss,val_loss,val_mse_db").map_err(io)?;
    for (label, inv, curve) in curves {
        for p in curve.iter() {
            writeln!(
                out,
                "{},{},{label},{inv},{},{},{},{}",
                meta.config_hash,
                meta.seed,
                p.epoch,
                p.train_loss,
                opt(p.val_loss),
                opt(p.val_mse_db)
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

/// Windowed online series, one block per labelled stream.
pub fn write_windows_csv<W: Write>(out: &mut W, meta: &CsvMeta, series: &[(String, &[WindowReport])]) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    writeln!(out, "config_hash,seed,run,t,window_index,mean_innovation_sq,state_mse_db,updated").map_err(io)?;
    for (label, windows) in series {
        for w in windows.iter() {
            writeln!(
                out,
                "{},{},{label},{},{},{},{},{}",
                meta.config_hash,
                meta.seed,
                w.end,
                w.index,
                w.mean_innovation_sq,
                opt(w.state_mse.map(to_db)),
                w.updated
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let x = vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])];
        let exact = mse_db(&x, &x).unwrap();
        assert!(exact.zero_error && exact.db == f64::NEG_INFINITY);
        let off = vec![x[0].add_scalar(1.0)];
        let unit = mse_db(&off, &x).unwrap();
        assert_eq!(unit.db, 0.0);
        assert!(!unit.zero_error);
        assert!(mse_db(&off, &[]).is_err());
        assert!(mse_linear(&[DMatrix::zeros(1, 2)], &[DMatrix::zeros(2, 1)]).is_err());
    }

    #[test]
    fn report_csv_carries_hash_and_seed() {
        let report = MetricReport {
            rows: vec![MetricRow {
                inv_r2_db: 3.0,
                nu_db: 0.0,
                estimator: "kf".into(),
                mse_db: -2.5,
                zero_error: false,
                runtime_s: 0.25,
                t: 80,
                n: 10,
                error: Some("a, b".into()),
            }],
        };
        let meta = CsvMeta {
            config_hash: "abcd".into(),
            seed: 4,
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf, &meta).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("config_hash,seed,"));
        assert_eq!(lines[1], "abcd,4,3,0,kf,80,10,-2.5,false,0.250000,a; b");
        assert!(report.find(3.0, "kf", 80).is_some());
        assert!(report.find(3.0, "kf", 81).is_none());
    }
}
