use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::scalar::Scalar;

pub const DEFAULT_BATCH: usize = 1024;
pub const DEFAULT_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansModel<T> {
    /// C×r cluster centers.
    pub centers: Matrix<T>,
}

impl<T: Scalar> KmeansModel<T> {
    pub fn n_clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn assign(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        if x.cols() != self.centers.cols() {
            return Err(Error::dim(format!(
                "points are {}-wide, centers {}-wide",
                x.cols(),
                self.centers.cols()
            )));
        }
        Ok(x.iter_rows().map(|p| nearest_center(p, &self.centers).0).collect())
    }
}

/// Index and squared distance of the nearest center; ties go to the lowest index.
#[inline]
pub fn nearest_center<T: Scalar>(p: &[T], centers: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, row) in centers.iter_rows().enumerate() {
        let d = squared_distance(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Mini-batch k-means with k-means++ seeding and per-center learning rate
/// 1/(visit count). When `batch >= n` every iteration uses the full data in
/// row order. Clusters left empty at the end are re-seeded on the point
/// farthest from its own center, then assignments are recomputed.
pub fn minibatch_kmeans<T: Scalar>(
    x: &Matrix<T>,
    n_clusters: usize,
    batch: usize,
    iters: usize,
    seed: u64,
) -> Result<(KmeansModel<T>, Vec<usize>)> {
    let n = x.rows();
    if n_clusters == 0 {
        return Err(Error::dim("k-means needs at least one cluster"));
    }
    if n_clusters > n {
        return Err(Error::dim(format!("{n_clusters} clusters for {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(x, n_clusters, &mut rng)?;
    let mut counts = vec![0u64; n_clusters];

    let batch = batch.max(1);
    let mut assigned = Vec::with_capacity(batch.min(n));
    for _ in 0..iters {
        let picks: Vec<usize> = if batch >= n {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, batch).into_vec()
        };
        assigned.clear();
        assigned.extend(picks.iter().map(|&i| nearest_center(x.row(i), &centers).0));
        for (&i, &c) in picks.iter().zip(&assigned) {
            counts[c] += 1;
            let eta = T::one() / T::of(counts[c] as f64);
            for (m, &v) in centers.row_mut(c).iter_mut().zip(x.row(i)) {
                *m += eta * (v - *m);
            }
        }
    }

    let mut labels: Vec<usize> = x.iter_rows().map(|p| nearest_center(p, &centers).0).collect();
    for _ in 0..n_clusters {
        let mut sizes = vec![0usize; n_clusters];
        labels.iter().for_each(|&c| sizes[c] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            break;
        };
        let mut far = None::<(usize, T)>;
        for (i, &c) in labels.iter().enumerate() {
            if sizes[c] < 2 {
                continue;
            }
            let d = squared_distance(x.row(i), centers.row(c));
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { break };
        let p = x.row(i).to_vec();
        centers.row_mut(empty).copy_from_slice(&p);
        labels = x.iter_rows().map(|p| nearest_center(p, &centers).0).collect();
    }
    Ok((KmeansModel { centers }, labels))
}

fn kmeans_plus_plus<T: Scalar>(x: &Matrix<T>, k: usize, rng: &mut ChaCha8Rng) -> Result<Matrix<T>> {
    let n = x.rows();
    let mut centers = Matrix::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = x
        .iter_rows()
        .map(|p| squared_distance(p, x.row(first)).as_f64())
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::value(format!(
                "only {c} distinct points available for {k} clusters"
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("positive total implies a candidate");
        centers.row_mut(c).copy_from_slice(x.row(pick));
        for (i, p) in x.iter_rows().enumerate() {
            let d = squared_distance(p, x.row(pick)).as_f64();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    Ok(centers)
}

/// Number of distinct rows (bitwise comparison).
pub(crate) fn distinct_rows<T: Scalar>(x: &Matrix<T>) -> usize {
    let mut keys: Vec<Vec<u64>> = x
        .iter_rows()
        .map(|r| r.iter().map(|v| v.as_f64().to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, per: usize) -> (Matrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..2 * per {
            let blob = i % 2;
            let cx = if blob == 0 { -10.0 } else { 10.0 };
            rows.push([cx + noise.sample(&mut rng), noise.sample(&mut rng)]);
            truth.push(blob);
        }
        (Matrix::from_rows(&rows).unwrap(), truth)
    }

    /// Full-batch Lloyd iterations from the same two seeds.
    fn lloyd_oracle(x: &Matrix<f64>, mut centers: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
        for _ in 0..50 {
            let mut sums = vec![[0.0; 2]; centers.len()];
            let mut counts = vec![0.0; centers.len()];
            for p in x.iter_rows() {
                let c = (0..centers.len())
                    .min_by(|&a, &b| {
                        let da = (p[0] - centers[a][0]).powi(2) + (p[1] - centers[a][1]).powi(2);
                        let db = (p[0] - centers[b][0]).powi(2) + (p[1] - centers[b][1]).powi(2);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                sums[c][0] += p[0];
                sums[c][1] += p[1];
                counts[c] += 1.0;
            }
            for c in 0..centers.len() {
                centers[c] = [sums[c][0] / counts[c], sums[c][1] / counts[c]];
            }
        }
        centers
    }

    #[test]
    fn single_cluster_is_column_mean() {
        let (x, _) = blobs(1, 40);
        let (km, labels) = minibatch_kmeans(&x, 1, DEFAULT_BATCH, DEFAULT_ITERS, 0).unwrap();
        let mean = x.column_means();
        for (a, b) in km.centers.row(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_blobs_match_lloyd() {
        let (x, truth) = blobs(2, 100);
        let (km, labels) = minibatch_kmeans(&x, 2, 64, 100, 5).unwrap();
        let oracle = lloyd_oracle(&x, vec![[-1.0, 0.0], [1.0, 0.0]]);
        for o in &oracle {
            let closest = km
                .centers
                .iter_rows()
                .map(|c| ((c[0] - o[0]).powi(2) + (c[1] - o[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 0.5, "{closest}");
        }
        // labels agree with the blob identity up to a relabeling
        let flip = labels[0] != truth[0];
        for (l, t) in labels.iter().zip(&truth) {
            assert_eq!(*l == *t, !flip);
        }
    }

    #[test]
    fn one_cluster_per_point() {
        let (x, _) = blobs(3, 5);
        let (km, labels) = minibatch_kmeans(&x, 10, 4, 20, 1).unwrap();
        let mut seen = labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        for (i, &c) in labels.iter().enumerate() {
            assert_eq!(km.centers.row(c), x.row(i));
        }
    }

    #[test]
    fn too_many_clusters() {
        let x = Matrix::<f64>::zeros(3, 2);
        assert!(matches!(minibatch_kmeans(&x, 4, 8, 1, 0), Err(Error::Dimension(_))));
        assert_eq!(distinct_rows(&x), 1);
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, _) = blobs(4, 300);
        let a = minibatch_kmeans(&x, 5, 50, 30, 9).unwrap();
        let b = minibatch_kmeans(&x, 5, 50, 30, 9).unwrap();
        assert_eq!(a, b);
    }
}
