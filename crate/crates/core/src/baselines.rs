//! Comparison samplers: uniform random, MC-dropout uncertainty and
//! cluster-based diversity.

use log::info;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::SpotId;
use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::numerics::{distinct_rows, minibatch_kmeans, pca_fit, DEFAULT_BATCH, DEFAULT_ITERS};
use crate::predictor::PredictorModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub dropout_rate: f64,
    pub passes: usize,
    pub diversity_pca_dim: usize,
    pub dbscan_min_points: usize,
    /// Fraction of candidates drawn at random to train the model the
    /// uncertainty sampler queries.
    pub warm_start_ratio: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.1,
            passes: 20,
            diversity_pca_dim: 128,
            dbscan_min_points: 5,
            warm_start_ratio: 0.05,
            seed: 42,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if self.passes == 0 {
            return Err(Error::Config("uncertainty sampling needs at least one pass".into()));
        }
        if !(self.warm_start_ratio > 0.0 && self.warm_start_ratio <= 1.0) {
            return Err(Error::Config("warm_start_ratio must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn check_budget(b: usize, n: usize) -> Result<()> {
    if b > n {
        return Err(Error::Budget(format!("budget {b} exceeds {n} candidates")));
    }
    Ok(())
}

/// Uniform sample of `b` ids without replacement.
pub fn random_sampler(ids: &[SpotId], b: usize, seed: u64) -> Result<Vec<SpotId>> {
    check_budget(b, ids.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, ids.len(), b).into_iter().map(|i| ids[i]).collect())
}

/// Independent stream for one (seed, spot) pair; passes select the sub-stream.
fn spot_rng(seed: u64, id: SpotId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17))
}

/// Mean over genes of the across-pass variance of dropout predictions.
pub fn uncertainty_scores<T: Scalar>(
    model: &PredictorModel<T>,
    features: &Matrix<T>,
    ids: &[SpotId],
    cfg: &BaselineConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !model.is_trained() {
        return Err(Error::State("uncertainty sampling needs a trained predictor".into()));
    }
    if features.rows() != ids.len() {
        return Err(Error::dim("one feature row per candidate id required"));
    }
    let g = model.genes();
    let t = cfg.passes as f64;
    let mut scores = Vec::with_capacity(ids.len());
    for (row, &id) in features.iter_rows().zip(ids) {
        let mut rng = spot_rng(cfg.seed, id);
        let mut sum = vec![0.0f64; g];
        let mut sq = vec![0.0f64; g];
        for pass in 0..cfg.passes {
            rng.set_stream(pass as u64);
            let y = model.predict_dropout(row, cfg.dropout_rate, &mut rng)?;
            for ((s, q), v) in sum.iter_mut().zip(sq.iter_mut()).zip(&y) {
                let v = v.as_f64();
                *s += v;
                *q += v * v;
            }
        }
        let var: f64 = sum
            .iter()
            .zip(&sq)
            .map(|(&s, &q)| (q / t - (s / t).powi(2)).max(0.0))
            .sum::<f64>()
            / g as f64;
        scores.push(var);
    }
    Ok(scores)
}

/// The `b` candidates with the highest dropout variance; ties go to the
/// lowest id.
pub fn uncertainty_sampler<T: Scalar>(
    model: &PredictorModel<T>,
    features: &Matrix<T>,
    ids: &[SpotId],
    b: usize,
    cfg: &BaselineConfig,
) -> Result<Vec<SpotId>> {
    check_budget(b, ids.len())?;
    let scores = uncertainty_scores(model, features, ids, cfg)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &c| scores[c].total_cmp(&scores[a]).then(ids[a].cmp(&ids[c])));
    Ok(order.into_iter().take(b).map(|i| ids[i]).collect())
}

/// Smallest cluster count the diversity sampler accepts: ⌈√N / 5⌉.
pub fn min_cluster_count(n: usize) -> usize {
    ((n as f64).sqrt() / 5.0).ceil().max(1.0) as usize
}

/// Per-column standardization; constant columns become 0.
fn standardize<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let n = x.rows().max(1) as f64;
    let means = x.column_means();
    let mut var = vec![0.0f64; x.cols()];
    for row in x.iter_rows() {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&means) {
            *v += (x - m).as_f64().powi(2);
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        if sd[j] > 1e-12 {
            T::of((x.get(i, j) - means[j]).as_f64() / sd[j])
        } else {
            T::zero()
        }
    })
}

/// DBSCAN labels (`None` for noise) with Euclidean radius `eps`.
pub fn dbscan<T: Scalar>(x: &Matrix<T>, eps: f64, min_points: usize) -> Vec<Option<usize>> {
    let n = x.rows();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| squared_distance(x.row(i), x.row(j)).as_f64() <= eps2)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_points).collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if labels[start].is_some() || !core[start] {
            continue;
        }
        labels[start] = Some(next);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    labels
}

/// Median distance to the k-th nearest other point.
fn median_knn_distance<T: Scalar>(x: &Matrix<T>, k: usize) -> f64 {
    let n = x.rows();
    if n < 2 {
        return 0.0;
    }
    let k = k.min(n - 1);
    let mut kth: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| squared_distance(x.row(i), x.row(j)).as_f64())
                .collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1].sqrt()
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    kth[n / 2]
}

/// Cluster labels used by the diversity sampler, and whether the k-means
/// fallback was taken.
pub fn diversity_clusters<T: Scalar>(features: &Matrix<T>, cfg: &BaselineConfig, seed: u64) -> Result<(Vec<usize>, bool)> {
    let n = features.rows();
    if n == 0 {
        return Ok((Vec::new(), false));
    }
    let z = standardize(features);
    let r = cfg.diversity_pca_dim.min(z.cols()).min(n);
    let projected = if n >= 2 { pca_fit(&z, r)?.project(&z)? } else { z };
    let eps = median_knn_distance(&projected, cfg.dbscan_min_points);
    let raw = dbscan(&projected, eps, cfg.dbscan_min_points);
    let found = raw.iter().flatten().max().map_or(0, |m| m + 1);
    let needed = min_cluster_count(n);
    if found >= needed {
        info!("diversity sampler: density clustering found {found} clusters (eps {eps:.4})");
        // noise points join the cluster of their nearest clustered point
        let clustered: Vec<usize> = (0..n).filter(|&i| raw[i].is_some()).collect();
        let labels = (0..n)
            .map(|i| {
                raw[i].unwrap_or_else(|| {
                    let near = clustered
                        .iter()
                        .copied()
                        .min_by(|&a, &b| {
                            squared_distance(projected.row(i), projected.row(a))
                                .as_f64()
                                .total_cmp(&squared_distance(projected.row(i), projected.row(b)).as_f64())
                        })
                        .expect("at least one cluster");
                    raw[near].expect("clustered")
                })
            })
            .collect();
        return Ok((labels, false));
    }
    let c = needed.min(distinct_rows(&projected));
    info!("diversity sampler: density clustering found {found} < {needed} clusters; k-means with {c}");
    let (_, labels) = minibatch_kmeans(&projected, c, DEFAULT_BATCH, DEFAULT_ITERS, seed)?;
    Ok((labels, true))
}

/// Round-robin draw across clusters, uniform within each cluster.
pub fn diversity_sampler<T: Scalar>(
    features: &Matrix<T>,
    ids: &[SpotId],
    b: usize,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<Vec<SpotId>> {
    check_budget(b, ids.len())?;
    if features.rows() != ids.len() {
        return Err(Error::dim("one feature row per candidate id required"));
    }
    let (labels, _) = diversity_clusters(features, cfg, seed)?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for m in members.iter_mut() {
        m.shuffle(&mut rng);
    }
    members.shuffle(&mut rng);
    let mut out = Vec::with_capacity(b);
    let mut depth = 0;
    while out.len() < b {
        for m in &members {
            if out.len() == b {
                break;
            }
            if let Some(&i) = m.get(depth) {
                out.push(ids[i]);
            }
        }
        depth += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{Linear, Mlp2, TrainConfig};
    use rand::Rng;
    use std::collections::BTreeSet;

    #[test]
    fn random_fixtures() {
        let ids: Vec<u64> = (0..10).collect();
        let mut all = random_sampler(&ids, 10, 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, ids);
        assert_eq!(random_sampler(&ids, 3, 9).unwrap(), random_sampler(&ids, 3, 9).unwrap());
        assert!(matches!(random_sampler(&ids, 11, 0), Err(Error::Budget(_))));

        let mut hits = [0usize; 10];
        let seeds = 10_000;
        for s in 0..seeds {
            for id in random_sampler(&ids, 3, s).unwrap() {
                hits[id as usize] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / seeds as f64;
            assert!((f - 0.3).abs() < 0.015, "{f}");
        }
    }

    fn toy_model(rate: f64) -> PredictorModel<f64> {
        let cfg = TrainConfig {
            dropout_rate: rate,
            hidden: 2,
            ..TrainConfig::default()
        };
        let mut m = PredictorModel::untrained(2, 1, &cfg);
        m.regressor = Mlp2 {
            l1: Linear::from_parts(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), vec![0.0, 0.0]),
            l2: Linear::from_parts(Matrix::from_rows(&[[1.0, 1.0]]).unwrap(), vec![0.0]),
        };
        m.trained = true;
        m
    }

    #[test]
    fn no_variance_without_dropout() {
        let model = toy_model(0.0);
        let x = Matrix::from_fn(6, 2, |i, j| (i * 2 + j) as f64);
        let ids = [5u64, 3, 9, 1, 7, 2];
        let cfg = BaselineConfig {
            dropout_rate: 0.0,
            ..BaselineConfig::default()
        };
        assert_eq!(uncertainty_sampler(&model, &x, &ids, 3, &cfg).unwrap(), vec![1, 2, 3]);
        let one_pass = BaselineConfig {
            passes: 1,
            dropout_rate: 0.1,
            ..BaselineConfig::default()
        };
        assert_eq!(uncertainty_sampler(&model, &x, &ids, 3, &one_pass).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn dropout_variance_matches_mask_enumeration() {
        // output = 2·(m1·x1 + m2·x2) at rate 0.5; enumerate the four masks
        let model = toy_model(0.5);
        let x = [1.0, 1.0];
        let outs: Vec<f64> = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
            .iter()
            .map(|(m1, m2)| 2.0 * (m1 * x[0] + m2 * x[1]))
            .collect();
        let mean = outs.iter().sum::<f64>() / 4.0;
        let exact = outs.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(exact > 0.0);

        let feats = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]).unwrap();
        let cfg = BaselineConfig {
            dropout_rate: 0.5,
            passes: 4000,
            ..BaselineConfig::default()
        };
        let s = uncertainty_scores(&model, &feats, &[0, 1], &cfg).unwrap();
        assert_eq!(s[1], 0.0);
        assert!((s[0] - exact).abs() < 0.1 * exact, "{} vs {exact}", s[0]);
        assert_eq!(uncertainty_sampler(&model, &feats, &[0, 1], 1, &cfg).unwrap(), vec![0]);
    }

    #[test]
    fn uncertainty_needs_trained_model() {
        let mut model = toy_model(0.1);
        model.trained = false;
        let x = Matrix::zeros(1, 2);
        assert!(matches!(
            uncertainty_sampler(&model, &x, &[0], 1, &BaselineConfig::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn uncertainty_ignores_presentation_order() {
        let model = toy_model(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(8, 2, |_, _| rng.random_range(-1.0..1.0));
        let ids: Vec<u64> = (0..8).collect();
        let cfg = BaselineConfig::default();
        let mut a = uncertainty_sampler(&model, &x, &ids, 4, &cfg).unwrap();
        let perm = [7usize, 2, 5, 0, 3, 6, 1, 4];
        let px = x.select_rows(&perm);
        let pids: Vec<u64> = perm.iter().map(|&p| ids[p]).collect();
        let mut b = uncertainty_sampler(&model, &px, &pids, 4, &cfg).unwrap();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn min_cluster_rule() {
        assert_eq!(min_cluster_count(2500), 10);
        assert_eq!(min_cluster_count(2000), 9);
        assert_eq!(min_cluster_count(1), 1);
    }

    #[test]
    fn identical_features_form_one_cluster() {
        let x = Matrix::from_fn(30, 3, |_, _| 1.5f64);
        let (labels, _) = diversity_clusters(&x, &BaselineConfig::default(), 0).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
        let ids: Vec<u64> = (0..30).collect();
        let picked = diversity_sampler(&x, &ids, 7, &BaselineConfig::default(), 4).unwrap();
        assert_eq!(picked.iter().collect::<BTreeSet<_>>().len(), 7);
    }

    #[test]
    fn two_blobs_one_from_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::from_fn(40, 2, |i, _| {
            let c = if i < 20 { -10.0 } else { 10.0 };
            c + rng.random_range(-1.0..1.0)
        });
        let ids: Vec<u64> = (0..40).collect();
        let (labels, fallback) = diversity_clusters(&x, &BaselineConfig::default(), 0).unwrap();
        assert!(!fallback);
        assert!(labels[..20].iter().all(|&l| l == labels[0]));
        assert!(labels[20..].iter().all(|&l| l == labels[20] && l != labels[0]));
        for seed in 0..5 {
            let picked = diversity_sampler(&x, &ids, 2, &BaselineConfig::default(), seed).unwrap();
            let blobs: BTreeSet<bool> = picked.iter().map(|&i| i < 20).collect();
            assert_eq!(blobs.len(), 2);
        }
    }

    #[test]
    fn diversity_touches_every_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::from_fn(90, 2, |i, _| (i % 3) as f64 * 20.0 + rng.random_range(-0.5..0.5));
        let ids: Vec<u64> = (0..90).collect();
        let cfg = BaselineConfig::default();
        let (labels, _) = diversity_clusters(&x, &cfg, 1).unwrap();
        let k = labels.iter().max().unwrap() + 1;
        let picked = diversity_sampler(&x, &ids, k, &cfg, 1).unwrap();
        let touched: BTreeSet<usize> = picked.iter().map(|&i| labels[i as usize]).collect();
        assert_eq!(touched.len(), k);
        assert!(matches!(diversity_sampler(&x, &ids, 91, &cfg, 1), Err(Error::Budget(_))));
    }
}
