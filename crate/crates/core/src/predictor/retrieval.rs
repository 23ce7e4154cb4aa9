//! Cross-modal retrieval against the training pool.

use std::cmp::Ordering;

use log::warn;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

use super::losses::normalize_rows;

/// Projected expression embeddings, raw expressions and matched cell types of
/// the training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    /// Unit-normalized projected expression embeddings.
    unit: Matrix<T>,
    pub expressions: Matrix<T>,
    pub cell_types: Vec<usize>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(embeddings: &Matrix<T>, expressions: Matrix<T>, cell_types: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != expressions.rows() || embeddings.rows() != cell_types.len() {
            return Err(Error::dim("memory bank parts disagree on row count"));
        }
        Ok(Self {
            unit: normalize_rows(embeddings).0,
            expressions,
            cell_types,
        })
    }

    pub fn len(&self) -> usize {
        self.unit.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cosine similarity of `query` to every bank entry.
    pub fn similarities(&self, query: &[T]) -> Result<Vec<T>> {
        if query.len() != self.unit.cols() {
            return Err(Error::dim(format!(
                "query is {}-wide, bank {}-wide",
                query.len(),
                self.unit.cols()
            )));
        }
        let qn = dot(query, query).sqrt();
        if qn < T::of(crate::numerics::COSINE_ZERO_NORM) {
            return Ok(vec![T::zero(); self.len()]);
        }
        Ok(self
            .unit
            .iter_rows()
            .map(|r| (dot(query, r) / qn).max(-T::one()).min(T::one()))
            .collect())
    }
}

/// Indices ordered by descending similarity, ties to the lowest index.
pub fn rank_descending<T: Scalar>(sims: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Top-`k` bank entries by cosine similarity to `query`, optionally leaving
/// out entry `exclude`. `k` larger than the eligible bank is clipped.
pub fn retrieve<T: Scalar>(query: &[T], bank: &MemoryBank<T>, k: usize, exclude: Option<usize>) -> Result<Vec<(usize, T)>> {
    if bank.is_empty() {
        return Err(Error::State("retrieval from an empty memory bank".into()));
    }
    let sims = bank.similarities(query)?;
    let eligible = bank.len() - usize::from(exclude.is_some_and(|e| e < bank.len()));
    if k > eligible {
        warn!("retrieval K={k} clipped to {eligible} bank entries");
    }
    Ok(top_k(&sims, k.min(eligible), exclude))
}

pub(crate) fn top_k<T: Scalar>(sims: &[T], k: usize, exclude: Option<usize>) -> Vec<(usize, T)> {
    rank_descending(sims)
        .into_iter()
        .filter(|&i| Some(i) != exclude)
        .take(k)
        .map(|i| (i, sims[i]))
        .collect()
}

/// Keeps the entries whose type is among the `t` most frequent types in
/// `hits`. Frequency ties go to the lower type id.
pub fn majority_type_filter<T: Copy>(hits: &[(usize, T)], types: &[usize], t: usize) -> Vec<(usize, T)> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &(i, _) in hits {
        let ty = types[i];
        match counts.iter_mut().find(|(c, _)| *c == ty) {
            Some((_, n)) => *n += 1,
            None => counts.push((ty, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep: Vec<usize> = counts.iter().take(t.max(1)).map(|&(ty, _)| ty).collect();
    hits.iter().copied().filter(|&(i, _)| keep.contains(&types[i])).collect()
}

/// Elementwise mean of the bank expressions over `hits`.
pub fn soft_label<T: Scalar>(hits: &[(usize, T)], bank: &MemoryBank<T>) -> Result<Vec<T>> {
    if hits.is_empty() {
        return Err(Error::State("soft label over an empty retrieval set".into()));
    }
    let mut out = vec![T::zero(); bank.expressions.cols()];
    for &(i, _) in hits {
        for (o, &v) in out.iter_mut().zip(bank.expressions.row(i)) {
            *o += v;
        }
    }
    let n = T::of_usize(hits.len());
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Retrieval outcome for one query: soft label and mean similarity over the
/// filtered set.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved<T> {
    pub soft_label: Vec<T>,
    pub mean_sim: f64,
}

/// Full retrieval path: top-K, majority type filter, soft label. `None` when
/// no eligible bank entry exists.
pub fn retrieve_soft_label<T: Scalar>(query: &[T], bank: &MemoryBank<T>, k: usize, t: usize, exclude: Option<usize>) -> Result<Option<Retrieved<T>>> {
    let sims = bank.similarities(query)?;
    let eligible = bank.len() - usize::from(exclude.is_some_and(|e| e < bank.len()));
    let hits = top_k(&sims, k.min(eligible), exclude);
    if hits.is_empty() {
        return Ok(None);
    }
    let kept = majority_type_filter(&hits, &bank.cell_types, t);
    let mean_sim = kept.iter().map(|&(_, s)| s.as_f64()).sum::<f64>() / kept.len() as f64;
    Ok(Some(Retrieved {
        soft_label: soft_label(&kept, bank)?,
        mean_sim,
    }))
}
