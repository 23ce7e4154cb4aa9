use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sweep::{Strategy, SweepReport, SweepRow};

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PCC_AXIS: &str = "per spot across genes, averaged over spots";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single row.
    pub std: f64,
}

fn stat(v: &[f64]) -> Stat {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Stat { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub strategy: Strategy,
    pub ratio: f64,
    pub completed: usize,
    pub failed: usize,
    pub mse: Option<Stat>,
    pub mae: Option<Stat>,
    pub pcc: Option<Stat>,
    pub final_reward: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pcc_axis: String,
    pub rows: usize,
    pub groups: Vec<GroupSummary>,
}

/// Means and standard deviations per (strategy, ratio) over completed rows.
pub fn summarize(rows: &[SweepRow]) -> Summary {
    let mut groups: BTreeMap<(Strategy, u64), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.strategy, r.ratio.to_bits())).or_default().push(r);
    }
    let groups = groups
        .into_values()
        .map(|g| {
            let ok: Vec<&SweepRow> = g.iter().copied().filter(|r| r.is_ok()).collect();
            let col = |f: fn(&SweepRow) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| stat(&v))
            };
            GroupSummary {
                strategy: g[0].strategy,
                ratio: g[0].ratio,
                completed: ok.len(),
                failed: g.len() - ok.len(),
                mse: col(|r| r.mse),
                mae: col(|r| r.mae),
                pcc: col(|r| r.pcc),
                final_reward: col(|r| r.final_reward),
            }
        })
        .collect();
    Summary {
        pcc_axis: PCC_AXIS.into(),
        rows: rows.len(),
        groups,
    }
}

/// Writes `report.csv` and `summary.json` into `dir`.
pub fn write_report(report: &SweepReport, dir: impl AsRef<Path>) -> Result<Summary> {
    if report.rows.is_empty() {
        return Err(Error::Config("refusing to write an empty report".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(REPORT_FILE);
    let csv_err = |e: csv::Error| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for r in &report.rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let summary = summarize(&report.rows);
    let spath = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&spath, text + "\n").map_err(|e| Error::io(&spath, e))?;
    Ok(summary)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: Strategy, ratio: f64, seed: u64, mse: Option<f64>) -> SweepRow {
        SweepRow {
            strategy,
            ratio,
            fold: 0,
            seed,
            mse,
            mae: mse.map(|m| m / 2.0),
            pcc: mse.map(|_| 0.5),
            final_reward: Some(1.0),
            status: if mse.is_some() { "ok".into() } else { "failed: numeric, boom".into() },
        }
    }

    #[test]
    fn empty_report_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_report(&SweepReport::default(), dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let rows = vec![
            row(Strategy::Random, 0.1, 0, Some(1.0)),
            row(Strategy::Random, 0.1, 1, Some(3.0)),
            row(Strategy::Random, 0.1, 2, None),
            row(Strategy::Scrl, 0.1, 0, Some(0.5)),
        ];
        let dir = tempfile::tempdir().unwrap();
        let summary = write_report(&SweepReport { rows: rows.clone() }, dir.path()).unwrap();
        let back = read_report(dir.path().join(REPORT_FILE)).unwrap();
        assert_eq!(back, rows);
        let header = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        assert!(header.starts_with("strategy,ratio,fold,seed,mse,mae,pcc,final_reward,status\n"));

        let random = summary.groups.iter().find(|g| g.strategy == Strategy::Random).unwrap();
        assert_eq!((random.completed, random.failed), (2, 1));
        let mse = random.mse.as_ref().unwrap();
        assert!((mse.mean - 2.0).abs() < 1e-12);
        assert!((mse.std - 2f64.sqrt()).abs() < 1e-12);
        let json: Summary = serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
        assert_eq!(json, summary);
    }
}
