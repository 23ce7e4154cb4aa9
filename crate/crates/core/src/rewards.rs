//! Reward components for a sampled set: single-cell cluster coverage, matched
//! cell-type diversity and spatial spread, plus their weighted sum.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::datamodel::{ExpressionBatch, SingleCellReference};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{
    cosine_unchecked, mean_coverage_distance, mean_pairwise_distance, minibatch_kmeans,
    nearest_center, normalized_entropy, pca_fit, KmeansModel, PcaModel,
};
use crate::scalar::Scalar;

pub const ENTROPY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_sc: f64,
    pub w_type: f64,
    pub w_spa: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_sc: 20.0,
            w_type: 5.0,
            w_spa: 0.05,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_sc, self.w_type, self.w_spa];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("reward weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_sc: f64,
    pub r_type: f64,
    pub r_spa: f64,
    pub combined: f64,
}

impl RewardBreakdown {
    /// Term-wise difference `self − earlier`.
    pub fn gain_over(&self, earlier: &RewardBreakdown) -> RewardBreakdown {
        RewardBreakdown {
            r_sc: self.r_sc - earlier.r_sc,
            r_type: self.r_type - earlier.r_type,
            r_spa: self.r_spa - earlier.r_spa,
            combined: self.combined - earlier.combined,
        }
    }
}

/// How the coverage distance enters the spatial reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    /// `(D_disp + D_cover) / 2`.
    #[default]
    Verbatim,
    /// `(D_disp + (√2 − D_cover)) / 2`, so better coverage scores higher.
    Corrected,
}

/// Which spots a round's reward is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScope {
    /// The cumulative pool.
    #[default]
    Pool,
    /// Only the spots chosen this round.
    Batch,
    /// Gain in pool reward from this round's picks. The first round, which
    /// has no earlier pool, does not update the policy.
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub spatial_mode: SpatialMode,
    pub scope: RewardScope,
    pub disp_exclude_self: bool,
    pub pca_dim: usize,
    pub n_clusters: usize,
    pub kmeans_batch: usize,
    pub kmeans_iters: usize,
    pub kmeans_seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            spatial_mode: SpatialMode::Verbatim,
            scope: RewardScope::Pool,
            disp_exclude_self: false,
            pca_dim: 50,
            n_clusters: 50,
            kmeans_batch: crate::numerics::DEFAULT_BATCH,
            kmeans_iters: crate::numerics::DEFAULT_ITERS,
            kmeans_seed: 42,
        }
    }
}

/// Fraction of the C clusters that are nearest to at least one row of `z`.
pub fn cluster_coverage_reward<T: Scalar>(z: &Matrix<T>, km: &KmeansModel<T>) -> Result<T> {
    if z.rows() == 0 {
        return Err(Error::value("coverage reward of an empty sample"));
    }
    let labels = km.assign(z)?;
    let mut hit = vec![false; km.n_clusters()];
    labels.iter().for_each(|&c| hit[c] = true);
    let reached = hit.iter().filter(|&&h| h).count();
    Ok(T::of_usize(reached) / T::of_usize(km.n_clusters()))
}

/// Cell type of the most cosine-similar reference cell for each row of `z`
/// (lowest reference index on ties).
pub fn assign_cell_types<T: Scalar>(z: &Matrix<T>, reference: &SingleCellReference<T>) -> Result<Vec<usize>> {
    if reference.is_empty() {
        return Err(Error::value("empty single-cell reference"));
    }
    let q = &reference.embeddings;
    if z.cols() != q.cols() {
        return Err(Error::dim(format!(
            "embeddings are {}-wide, reference is {}-wide",
            z.cols(),
            q.cols()
        )));
    }
    Ok(z.iter_rows()
        .map(|zi| {
            let mut best = (0, T::neg_infinity());
            for (j, qj) in q.iter_rows().enumerate() {
                let s = cosine_unchecked(zi, qj);
                if s > best.1 {
                    best = (j, s);
                }
            }
            reference.cell_types[best.0]
        })
        .collect())
}

pub fn type_diversity_reward<T: Scalar>(labels: &[usize], eps: T) -> Result<T> {
    if labels.is_empty() {
        return Err(Error::value("type diversity of an empty sample"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![T::zero(); k];
    labels.iter().for_each(|&l| counts[l] += T::one());
    normalized_entropy(&counts, eps)
}

pub fn spatial_reward<T: Scalar>(
    all: &[[T; 2]],
    sampled: &[[T; 2]],
    mode: SpatialMode,
    exclude_self: bool,
) -> Result<T> {
    if sampled.is_empty() {
        return Err(Error::value("spatial reward of an empty sample"));
    }
    let disp = mean_pairwise_distance(sampled, exclude_self)?;
    let cover = mean_coverage_distance(all, sampled)?;
    let two = T::of(2.0);
    Ok(match mode {
        SpatialMode::Verbatim => (disp + cover) / two,
        SpatialMode::Corrected => (disp + (T::SQRT_2() - cover)) / two,
    })
}

pub fn combined_reward(r_sc: f64, r_type: f64, r_spa: f64, w: &RewardWeights) -> RewardBreakdown {
    RewardBreakdown {
        r_sc,
        r_type,
        r_spa,
        combined: w.w_sc * r_sc + w.w_type * r_type + w.w_spa * r_spa,
    }
}

/// Expression embeddings for a revealed batch. Without precomputed embeddings
/// each expression row is zero-padded or truncated to the reference width.
pub fn batch_embeddings<T: Scalar>(batch: &ExpressionBatch<T>, width: usize) -> Matrix<T> {
    if let Some(e) = &batch.embeddings {
        return e.clone();
    }
    let g = batch.expressions.cols();
    Matrix::from_fn(batch.expressions.rows(), width, |i, j| {
        if j < g {
            batch.expressions.get(i, j)
        } else {
            T::zero()
        }
    })
}

/// Reward state derived from the single-cell reference: the PCA basis and
/// the cluster centers in PCA space.
#[derive(Debug, Clone)]
pub struct RewardContext<T> {
    pub pca: PcaModel<T>,
    pub kmeans: KmeansModel<T>,
    pub reference: SingleCellReference<T>,
    pub config: RewardConfig,
}

impl<T: Scalar> RewardContext<T> {
    pub fn fit(reference: &SingleCellReference<T>, config: &RewardConfig) -> Result<Self> {
        config.weights.validate()?;
        let q = &reference.embeddings;
        let r = config.pca_dim.min(q.rows()).min(q.cols());
        if r < config.pca_dim {
            info!("reference PCA dimension clipped from {} to {r}", config.pca_dim);
        }
        let pca = pca_fit(q, r)?;
        let projected = pca.project(q)?;
        let distinct = crate::numerics::distinct_rows(&projected);
        let c = config.n_clusters.min(distinct).max(1);
        if c < config.n_clusters {
            warn!("reference has {distinct} distinct cells; using {c} clusters");
        }
        let (kmeans, _) = minibatch_kmeans(
            &projected,
            c,
            config.kmeans_batch,
            config.kmeans_iters,
            config.kmeans_seed,
        )?;
        Ok(Self {
            pca,
            kmeans,
            reference: reference.clone(),
            config: config.clone(),
        })
    }

    pub fn embedding_width(&self) -> usize {
        self.reference.embeddings.cols()
    }

    pub fn embeddings_for(&self, batch: &ExpressionBatch<T>) -> Matrix<T> {
        batch_embeddings(batch, self.embedding_width())
    }

    /// Rewards for sampled embeddings `z` at `sampled` coordinates, with
    /// coverage measured against `candidates`.
    pub fn evaluate(&self, z: &Matrix<T>, sampled: &[[T; 2]], candidates: &[[T; 2]]) -> Result<RewardBreakdown> {
        let (clusters, types) = self.labels(z)?;
        self.evaluate_labels(&clusters, &types, sampled, candidates)
    }

    /// Cluster and cell-type labels of each row of `z`; rewards over a growing
    /// pool can cache these per spot.
    pub fn labels(&self, z: &Matrix<T>) -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((self.cluster_labels(z)?, assign_cell_types(z, &self.reference)?))
    }

    /// Same as [`Self::evaluate`] from precomputed labels.
    pub fn evaluate_labels(
        &self,
        clusters: &[usize],
        types: &[usize],
        sampled: &[[T; 2]],
        candidates: &[[T; 2]],
    ) -> Result<RewardBreakdown> {
        if clusters.is_empty() {
            return Err(Error::value("coverage reward of an empty sample"));
        }
        let c = self.kmeans.n_clusters();
        let mut hit = vec![false; c];
        clusters.iter().for_each(|&k| hit[k] = true);
        let r_sc = hit.iter().filter(|&&h| h).count() as f64 / c as f64;
        let r_type = type_diversity_reward(types, ENTROPY_EPS)?;
        let r_spa = spatial_reward(
            candidates,
            sampled,
            self.config.spatial_mode,
            self.config.disp_exclude_self,
        )?;
        Ok(combined_reward(r_sc, r_type, r_spa.as_f64(), &self.config.weights))
    }

    /// Nearest-cluster labels of embeddings in the reference PCA space.
    pub fn cluster_labels(&self, z: &Matrix<T>) -> Result<Vec<usize>> {
        let projected = self.pca.project(z)?;
        Ok(projected
            .iter_rows()
            .map(|p| nearest_center(p, &self.kmeans.centers).0)
            .collect())
    }
}
