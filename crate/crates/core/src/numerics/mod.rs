//! Deterministic numerical primitives shared by the reward, sampling and
//! prediction code.

mod kmeans;
mod pca;

pub(crate) use kmeans::distinct_rows;
pub use kmeans::{minibatch_kmeans, nearest_center, KmeansModel, DEFAULT_BATCH, DEFAULT_ITERS};
pub use pca::{pca_fit, symmetric_eigen, PcaModel};

use crate::error::{Error, Result};
use crate::matrix::dot;
use crate::scalar::Scalar;

/// Norm below which a vector is treated as zero by [`cosine`].
pub const COSINE_ZERO_NORM: f64 = 1e-12;

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Cosine similarity; 0 when either vector has (near-)zero norm.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    Ok(cosine_unchecked(a, b))
}

#[inline]
pub(crate) fn cosine_unchecked<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let tiny = T::of(COSINE_ZERO_NORM);
    if na < tiny || nb < tiny {
        return T::zero();
    }
    let c = dot(a, b) / (na * nb);
    c.max(-T::one()).min(T::one())
}

/// Entropy of the observed (nonzero) categories, normalized by `log(K + eps)`
/// where K is the number of nonzero categories. A single category gives 0.
pub fn normalized_entropy<T: Scalar>(counts: &[T], eps: T) -> Result<T> {
    if counts.iter().any(|&c| c < T::zero() || !c.is_finite()) {
        return Err(Error::value("counts must be finite and nonnegative"));
    }
    let total: T = counts.iter().copied().sum();
    if total <= T::zero() {
        return Err(Error::value("normalized entropy of all-zero counts"));
    }
    let observed: Vec<T> = counts.iter().copied().filter(|&c| c > T::zero()).collect();
    let k = observed.len();
    if k == 1 {
        return Ok(T::zero());
    }
    let h: T = observed
        .iter()
        .map(|&c| {
            let p = c / total;
            -p * (p + eps).ln()
        })
        .sum();
    Ok(h / (T::of_usize(k) + eps).ln())
}

#[inline]
pub(crate) fn dist2d<T: Scalar>(a: [T; 2], b: [T; 2]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Mean Euclidean distance over ordered pairs. With `exclude_self` false the
/// denominator is |P|² and self-pairs count as zero-distance pairs; with it
/// true the denominator is |P|(|P|−1) and a single point gives 0.
pub fn mean_pairwise_distance<T: Scalar>(points: &[[T; 2]], exclude_self: bool) -> Result<T> {
    let n = points.len();
    if n == 0 {
        return Err(Error::value("pairwise distance of an empty point set"));
    }
    let mut total = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            total += dist2d(points[i], points[j]);
        }
    }
    // each unordered pair appears twice among ordered pairs
    total = total + total;
    let denom = if exclude_self {
        if n == 1 {
            return Ok(T::zero());
        }
        T::of_usize(n * (n - 1))
    } else {
        T::of_usize(n * n)
    };
    Ok(total / denom)
}

/// Mean distance from every point in `all` to its nearest point in `sampled`.
pub fn mean_coverage_distance<T: Scalar>(all: &[[T; 2]], sampled: &[[T; 2]]) -> Result<T> {
    if sampled.is_empty() {
        return Err(Error::value("coverage distance needs a nonempty sample"));
    }
    if all.is_empty() {
        return Ok(T::zero());
    }
    let total: T = all
        .iter()
        .map(|&p| {
            sampled
                .iter()
                .map(|&s| dist2d(p, s))
                .fold(T::infinity(), T::min)
        })
        .sum();
    Ok(total / T::of_usize(all.len()))
}
