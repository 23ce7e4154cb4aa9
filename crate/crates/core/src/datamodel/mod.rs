//! Dataset schema, on-disk directory layout and the sequencing simulator.
//!
//! A dataset directory holds:
//!
//! - `features.scrm` (N×d image-derived features)
//! - `expressions.scrm` (N×G expression, already log-transformed)
//! - `expr_embeddings.scrm` (optional, N×d_z)
//! - `spots.csv` with header `spot_id,slide_id,x,y`; row order is matrix row order
//! - `reference_embeddings.scrm` (M×d_z single-cell reference)
//! - `reference_types.csv` with header `cell_id,type_name`
//!
//! Expression rows stay hidden behind [`Dataset::reveal`], which records
//! every spot that has been "sequenced".

pub mod scrm;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub use scrm::{load_matrix, save_matrix};

pub type SpotId = u64;

pub const FEATURES_FILE: &str = "features.scrm";
pub const EXPRESSIONS_FILE: &str = "expressions.scrm";
pub const EMBEDDINGS_FILE: &str = "expr_embeddings.scrm";
pub const SPOTS_FILE: &str = "spots.csv";
pub const REFERENCE_EMBEDDINGS_FILE: &str = "reference_embeddings.scrm";
pub const REFERENCE_TYPES_FILE: &str = "reference_types.csv";

/// One candidate sequencing location. Its matrix row is its position in
/// [`Dataset::spots`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotRecord {
    pub spot_id: SpotId,
    pub slide_id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleCellReference<T> {
    pub embeddings: Matrix<T>,
    pub cell_types: Vec<usize>,
    pub label_names: Vec<String>,
}

impl<T: Scalar> SingleCellReference<T> {
    pub fn new(embeddings: Matrix<T>, cell_types: Vec<usize>, label_names: Vec<String>) -> Result<Self> {
        if cell_types.len() != embeddings.rows() {
            return Err(Error::Schema(format!(
                "{} reference cells but {} type labels",
                embeddings.rows(),
                cell_types.len()
            )));
        }
        if let Some(bad) = cell_types.iter().find(|&&t| t >= label_names.len()) {
            return Err(Error::value(format!(
                "cell type label {bad} outside [0, {})",
                label_names.len()
            )));
        }
        Ok(Self {
            embeddings,
            cell_types,
            label_names,
        })
    }

    pub fn len(&self) -> usize {
        self.cell_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_types.is_empty()
    }

    pub fn n_types(&self) -> usize {
        self.label_names.len()
    }
}

/// Expression rows returned by a simulated sequencing run, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionBatch<T> {
    pub ids: Vec<SpotId>,
    pub expressions: Matrix<T>,
    pub embeddings: Option<Matrix<T>>,
}

#[derive(Debug)]
pub struct Dataset<T> {
    pub spots: Vec<SpotRecord>,
    pub features: Matrix<T>,
    expressions: Matrix<T>,
    expr_embeddings: Option<Matrix<T>>,
    pub reference: SingleCellReference<T>,
    index: HashMap<SpotId, usize>,
    revealed: Mutex<BTreeSet<SpotId>>,
}

impl<T: Scalar> Clone for Dataset<T> {
    fn clone(&self) -> Self {
        Self {
            spots: self.spots.clone(),
            features: self.features.clone(),
            expressions: self.expressions.clone(),
            expr_embeddings: self.expr_embeddings.clone(),
            reference: self.reference.clone(),
            index: self.index.clone(),
            revealed: Mutex::new(self.revealed()),
        }
    }
}

impl<T: Scalar> Dataset<T> {
    /// Assembles and validates a dataset; `revealed` starts empty.
    pub fn new(
        spots: Vec<SpotRecord>,
        features: Matrix<T>,
        expressions: Matrix<T>,
        expr_embeddings: Option<Matrix<T>>,
        reference: SingleCellReference<T>,
    ) -> Result<Self> {
        let n = spots.len();
        let mut named = vec![(FEATURES_FILE, &features), (EXPRESSIONS_FILE, &expressions)];
        if let Some(e) = &expr_embeddings {
            named.push((EMBEDDINGS_FILE, e));
        }
        for (name, m) in named {
            if m.rows() != n {
                return Err(Error::Schema(format!(
                    "{name} has {} rows but {SPOTS_FILE} lists {n} spots",
                    m.rows()
                )));
            }
            if let Some(i) = m.first_non_finite() {
                return Err(Error::value(format!("{name}: non-finite value at index {i}")));
            }
        }
        if let Some(e) = &expr_embeddings {
            if e.cols() != reference.embeddings.cols() {
                return Err(Error::Schema(format!(
                    "expression embeddings are {}-wide, reference embeddings {}-wide",
                    e.cols(),
                    reference.embeddings.cols()
                )));
            }
        }
        let mut index = HashMap::with_capacity(n);
        for (row, s) in spots.iter().enumerate() {
            if !(s.x.is_finite() && s.y.is_finite())
                || !(0.0..=1.0).contains(&s.x)
                || !(0.0..=1.0).contains(&s.y)
            {
                return Err(Error::value(format!(
                    "spot {} coordinates ({}, {}) outside [0,1]²",
                    s.spot_id, s.x, s.y
                )));
            }
            if index.insert(s.spot_id, row).is_some() {
                return Err(Error::Schema(format!("duplicate spot id {}", s.spot_id)));
            }
        }
        Ok(Self {
            spots,
            features,
            expressions,
            expr_embeddings,
            reference,
            index,
            revealed: Mutex::new(BTreeSet::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.spots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spots.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn gene_count(&self) -> usize {
        self.expressions.cols()
    }

    pub fn has_expr_embeddings(&self) -> bool {
        self.expr_embeddings.is_some()
    }

    pub fn ids(&self) -> Vec<SpotId> {
        self.spots.iter().map(|s| s.spot_id).collect()
    }

    pub fn row_of(&self, id: SpotId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::Key(id))
    }

    pub fn rows_of(&self, ids: &[SpotId]) -> Result<Vec<usize>> {
        ids.iter().map(|&id| self.row_of(id)).collect()
    }

    pub fn coords(&self, row: usize) -> [f64; 2] {
        let s = &self.spots[row];
        [s.x, s.y]
    }

    /// Distinct slide ids in ascending order.
    pub fn slides(&self) -> Vec<u32> {
        self.spots
            .iter()
            .map(|s| s.slide_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn revealed(&self) -> BTreeSet<SpotId> {
        self.revealed.lock().expect("revealed set poisoned").clone()
    }

    pub fn is_revealed(&self, id: SpotId) -> bool {
        self.revealed.lock().expect("revealed set poisoned").contains(&id)
    }

    /// Simulated sequencing: returns the hidden rows for `ids` and marks them
    /// revealed. Unknown ids fail before any state changes.
    pub fn reveal(&self, ids: &[SpotId]) -> Result<ExpressionBatch<T>> {
        let rows = self.rows_of(ids)?;
        let batch = ExpressionBatch {
            ids: ids.to_vec(),
            expressions: self.expressions.select_rows(&rows),
            embeddings: self.expr_embeddings.as_ref().map(|e| e.select_rows(&rows)),
        };
        self.revealed
            .lock()
            .expect("revealed set poisoned")
            .extend(ids.iter().copied());
        Ok(batch)
    }

    /// Clears the revealed set. Used between independent experiment cells.
    pub fn reset_revealed(&self) {
        self.revealed.lock().expect("revealed set poisoned").clear();
    }

    /// Ground-truth expression rows for evaluation. Does not mark anything revealed.
    pub fn ground_truth(&self, rows: &[usize]) -> Matrix<T> {
        self.expressions.select_rows(rows)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_dataset_parts(
            dir,
            &self.spots,
            &self.features,
            &self.expressions,
            self.expr_embeddings.as_ref(),
            &self.reference,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceTypeRow {
    cell_id: u64,
    type_name: String,
}

pub fn save_dataset_parts<T: Scalar>(
    dir: impl AsRef<Path>,
    spots: &[SpotRecord],
    features: &Matrix<T>,
    expressions: &Matrix<T>,
    expr_embeddings: Option<&Matrix<T>>,
    reference: &SingleCellReference<T>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_matrix(features, dir.join(FEATURES_FILE))?;
    save_matrix(expressions, dir.join(EXPRESSIONS_FILE))?;
    if let Some(e) = expr_embeddings {
        save_matrix(e, dir.join(EMBEDDINGS_FILE))?;
    }
    save_matrix(&reference.embeddings, dir.join(REFERENCE_EMBEDDINGS_FILE))?;

    let spots_path = dir.join(SPOTS_FILE);
    let mut w = csv::Writer::from_path(&spots_path).map_err(|e| csv_err(&spots_path, e))?;
    for s in spots {
        w.serialize(s).map_err(|e| csv_err(&spots_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&spots_path, e))?;

    let types_path = dir.join(REFERENCE_TYPES_FILE);
    let mut w = csv::Writer::from_path(&types_path).map_err(|e| csv_err(&types_path, e))?;
    for (cell_id, &t) in reference.cell_types.iter().enumerate() {
        w.serialize(ReferenceTypeRow {
            cell_id: cell_id as u64,
            type_name: reference.label_names[t].clone(),
        })
        .map_err(|e| csv_err(&types_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&types_path, e))?;
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format {
            path: path.to_path_buf(),
            msg: format!("{other:?}"),
        },
    }
}

fn check_header(path: &Path, rdr: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| csv_err(path, e))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("header {got:?}, expected {expected:?}"),
        });
    }
    Ok(())
}

pub fn read_spots(path: &Path) -> Result<Vec<SpotRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    check_header(path, &mut rdr, &["spot_id", "slide_id", "x", "y"])?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Reads `reference_types.csv`; label integers follow first-appearance order.
pub fn read_reference_types(path: &Path) -> Result<(Vec<usize>, Vec<String>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    check_header(path, &mut rdr, &["cell_id", "type_name"])?;
    let mut names: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    for row in rdr.deserialize::<ReferenceTypeRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let next = names.len();
        let label = *lookup.entry(row.type_name.clone()).or_insert_with(|| {
            names.push(row.type_name);
            next
        });
        labels.push(label);
    }
    Ok((labels, names))
}

pub fn load_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let spots = read_spots(&dir.join(SPOTS_FILE))?;
    let features = load_matrix(dir.join(FEATURES_FILE))?;
    let expressions = load_matrix(dir.join(EXPRESSIONS_FILE))?;
    let emb_path = dir.join(EMBEDDINGS_FILE);
    let expr_embeddings = if emb_path.exists() {
        Some(load_matrix(&emb_path)?)
    } else {
        None
    };
    let ref_emb = load_matrix(dir.join(REFERENCE_EMBEDDINGS_FILE))?;
    let (labels, names) = read_reference_types(&dir.join(REFERENCE_TYPES_FILE))?;
    let reference = SingleCellReference::new(ref_emb, labels, names)?;
    Dataset::new(spots, features, expressions, expr_embeddings, reference)
}

/// Min–max normalizes raw coordinates into [0,1]² independently per slide.
/// A slide with zero extent along an axis maps that axis to 0.
pub fn normalize_slide_coordinates(spots: &mut [SpotRecord]) {
    let mut bounds: BTreeMap<u32, [f64; 4]> = BTreeMap::new();
    for s in spots.iter() {
        let b = bounds
            .entry(s.slide_id)
            .or_insert([f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY]);
        b[0] = b[0].min(s.x);
        b[1] = b[1].max(s.x);
        b[2] = b[2].min(s.y);
        b[3] = b[3].max(s.y);
    }
    let scale = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    for s in spots.iter_mut() {
        let b = bounds[&s.slide_id];
        s.x = scale(s.x, b[0], b[1]);
        s.y = scale(s.y, b[2], b[3]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset<f64> {
        let spots = (0..4)
            .map(|i| SpotRecord {
                spot_id: 10 + i,
                slide_id: (i % 2) as u32,
                x: i as f64 / 4.0,
                y: 0.5,
            })
            .collect();
        let features = Matrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let expressions = Matrix::from_fn(4, 3, |i, j| (i + j) as f64);
        let emb = Matrix::from_fn(4, 2, |i, j| (i as f64) - (j as f64));
        let reference = SingleCellReference::new(
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            vec![0, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        Dataset::new(spots, features, expressions, Some(emb), reference).unwrap()
    }

    #[test]
    fn reveal_empty_is_noop() {
        let ds = tiny();
        let b = ds.reveal(&[]).unwrap();
        assert_eq!(b.expressions.rows(), 0);
        assert!(ds.revealed().is_empty());
    }

    #[test]
    fn reveal_is_idempotent() {
        let ds = tiny();
        let a = ds.reveal(&[13]).unwrap();
        let b = ds.reveal(&[13]).unwrap();
        assert_eq!(a, b);
        assert_eq!(ds.revealed(), BTreeSet::from([13]));
        assert_eq!(a.expressions.row(0), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn reveal_all_returns_expression_matrix() {
        let ds = tiny();
        let b = ds.reveal(&ds.ids()).unwrap();
        assert_eq!(b.expressions, ds.ground_truth(&[0, 1, 2, 3]));
        assert_eq!(ds.revealed().len(), 4);
    }

    #[test]
    fn unknown_id_is_key_error_and_changes_nothing() {
        let ds = tiny();
        assert!(matches!(ds.reveal(&[10, 99]), Err(Error::Key(99))));
        assert!(ds.revealed().is_empty());
    }

    #[test]
    fn directory_round_trip_and_schema_errors() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back: Dataset<f64> = load_dataset(dir.path()).unwrap();
        assert_eq!(back.spots, ds.spots);
        assert_eq!(back.features, ds.features);
        assert_eq!(back.reference, ds.reference);
        assert!(back.revealed().is_empty());

        fs::remove_file(dir.path().join(EMBEDDINGS_FILE)).unwrap();
        let no_emb: Dataset<f64> = load_dataset(dir.path()).unwrap();
        assert!(!no_emb.has_expr_embeddings());

        save_matrix(&Matrix::<f64>::zeros(3, 2), dir.path().join(FEATURES_FILE)).unwrap();
        assert!(matches!(load_dataset::<f64>(dir.path()), Err(Error::Schema(_))));
    }

    #[test]
    fn out_of_range_coordinates_rejected() {
        let mut ds = tiny();
        ds.spots[1].x = 1.5;
        let err = Dataset::new(
            ds.spots.clone(),
            ds.features.clone(),
            ds.expressions.clone(),
            None,
            ds.reference.clone(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Value(_)));
    }

    #[test]
    fn reference_labels_follow_first_appearance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(REFERENCE_TYPES_FILE);
        fs::write(&p, "cell_id,type_name\n0,T\n1,B\n2,T\n3,NK\n").unwrap();
        let (labels, names) = read_reference_types(&p).unwrap();
        assert_eq!(labels, vec![0, 1, 0, 2]);
        assert_eq!(names, vec!["T", "B", "NK"]);
    }

    #[test]
    fn per_slide_normalization() {
        let mut spots = vec![
            SpotRecord { spot_id: 0, slide_id: 0, x: 100.0, y: 10.0 },
            SpotRecord { spot_id: 1, slide_id: 0, x: 300.0, y: 30.0 },
            SpotRecord { spot_id: 2, slide_id: 1, x: 5.0, y: 5.0 },
        ];
        normalize_slide_coordinates(&mut spots);
        assert_eq!((spots[0].x, spots[0].y), (0.0, 0.0));
        assert_eq!((spots[1].x, spots[1].y), (1.0, 1.0));
        assert_eq!((spots[2].x, spots[2].y), (0.0, 0.0));
    }
}
