//! Metrics, sample-level cross-validation and the budget sweep.

mod report;
mod sweep;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub use report::{read_report, summarize, write_report, GroupSummary, Summary, PCC_AXIS, REPORT_FILE, SUMMARY_FILE};
pub use sweep::{
    budget_sweep, evaluate_pool, fold_rows, select_pool, CellKey, Selection, Strategy, SweepConfig, SweepReport,
    SweepRow, PROGRESS_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub mse: f64,
    pub mae: f64,
    pub pcc: f64,
}

/// MSE and MAE over all entries; PCC per row across columns, averaged, with
/// constant rows contributing 0.
pub fn metrics<T: Scalar>(y: &Matrix<T>, y_hat: &Matrix<T>) -> Result<MetricTriple> {
    if y.shape() != y_hat.shape() {
        return Err(Error::dim(format!(
            "truth {:?} vs predictions {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    if y.rows() == 0 || y.cols() == 0 {
        return Err(Error::dim("metrics need at least one entry"));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in y.data().iter().zip(y_hat.data()) {
        let d = a.as_f64() - b.as_f64();
        se += d * d;
        ae += d.abs();
    }
    let total = y.data().len() as f64;
    let pcc = y
        .iter_rows()
        .zip(y_hat.iter_rows())
        .map(|(a, b)| row_pearson(a, b))
        .sum::<f64>()
        / y.rows() as f64;
    Ok(MetricTriple {
        mse: se / total,
        mae: ae / total,
        pcc,
    })
}

fn row_pearson<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mb = b.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64() - ma, y.as_f64() - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    let den = (saa * sbb).sqrt();
    if den < 1e-12 {
        0.0
    } else {
        (sab / den).clamp(-1.0, 1.0)
    }
}

/// Fold index per sample id. Samples are shuffled, then dealt round-robin, so
/// fold sizes differ by at most one.
pub fn crossval_split(samples: &[u32], folds: usize, seed: u64) -> Result<BTreeMap<u32, usize>> {
    let mut distinct: Vec<u32> = samples.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if folds == 0 || distinct.len() < folds {
        return Err(Error::Config(format!(
            "{} samples cannot fill {folds} folds",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    distinct.shuffle(&mut rng);
    Ok(distinct.into_iter().enumerate().map(|(i, s)| (s, i % folds)).collect())
}
