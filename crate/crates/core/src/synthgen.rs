//! Synthetic datasets with planted cell types and spatial patches.
//!
//! Every cell type has an expression prototype (a shared baseline plus a
//! type-specific marker program) and a feature prototype. Within-type
//! variation comes from a low-dimensional latent factor shared by features
//! and expression, plus independent noise. Expression embeddings are a fixed
//! random linear map of the baseline-subtracted expression.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{normalize_slide_coordinates, Dataset, SingleCellReference, SpotRecord};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const PLANTED_TYPES_FILE: &str = "planted_types.csv";
pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_spots: usize,
    pub n_slides: usize,
    pub genes: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub n_types: usize,
    pub n_reference: usize,
    /// Expression noise σ; also scales the latent within-type variation.
    pub noise: f64,
    pub feature_noise: f64,
    pub embed_noise: f64,
    /// Relative abundance of type k is `abundance_ratio^k`.
    pub abundance_ratio: f64,
    pub marker_strength: f64,
    pub latent_dim: usize,
    pub patch_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_spots: 2000,
            n_slides: 4,
            genes: 300,
            feature_dim: 64,
            embed_dim: 32,
            n_types: 8,
            n_reference: 5000,
            noise: 0.3,
            feature_noise: 0.5,
            embed_noise: 0.05,
            abundance_ratio: 0.5,
            marker_strength: 2.0,
            latent_dim: 4,
            patch_sigma: 0.12,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_types == 0 || self.n_slides == 0 {
            return bad("synthetic data needs at least one type and one slide".into());
        }
        if self.n_types > self.n_reference {
            return bad(format!("{} types but only {} reference cells", self.n_types, self.n_reference));
        }
        if self.n_spots < self.n_types || self.n_spots < self.n_slides {
            return bad(format!("{} spots for {} types on {} slides", self.n_spots, self.n_types, self.n_slides));
        }
        if self.genes == 0 || self.feature_dim == 0 || self.embed_dim == 0 {
            return bad("genes, feature_dim and embed_dim must be positive".into());
        }
        let scales = [self.noise, self.feature_noise, self.embed_noise, self.marker_strength];
        if scales.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise levels and marker strength must be finite and >= 0".into());
        }
        if !(self.abundance_ratio > 0.0 && self.abundance_ratio <= 1.0) {
            return bad("abundance_ratio must lie in (0, 1]".into());
        }
        if !(self.patch_sigma > 0.0) {
            return bad("patch_sigma must be positive".into());
        }
        Ok(())
    }
}

/// A generated dataset plus the planted type of every spot.
#[derive(Debug)]
pub struct SyntheticData<T> {
    pub dataset: Dataset<T>,
    pub planted: Vec<usize>,
    pub type_names: Vec<String>,
}

impl<T: Scalar> Clone for SyntheticData<T> {
    fn clone(&self) -> Self {
        Self {
            dataset: self.dataset.clone(),
            planted: self.planted.clone(),
            type_names: self.type_names.clone(),
        }
    }
}

impl<T: Scalar> SyntheticData<T> {
    /// Number of distinct planted types among `rows`.
    pub fn type_coverage(&self, rows: &[usize]) -> usize {
        let mut seen = vec![false; self.type_names.len()];
        rows.iter().for_each(|&r| seen[self.planted[r]] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

/// Index drawn with probability proportional to `weights`.
fn draw(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in weights.iter().enumerate() {
        if u < *w {
            return c;
        }
        u -= w;
    }
    weights.len() - 1
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

struct Model {
    base: Vec<f64>,
    expr_proto: Vec<Vec<f64>>,
    feat_proto: Vec<Vec<f64>>,
    /// per type: genes × latent
    expr_latent: Vec<Vec<Vec<f64>>>,
    /// feature_dim × latent
    feat_latent: Vec<Vec<f64>>,
    /// embed_dim × genes
    embed_map: Vec<Vec<f64>>,
}

impl Model {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let g = cfg.genes;
        let base: Vec<f64> = (0..g).map(|_| rng.random_range(0.5..2.0)).collect();
        let per_type = (g / cfg.n_types).max(1);
        let expr_proto = (0..cfg.n_types)
            .map(|t| {
                let mut p = base.clone();
                for k in 0..per_type {
                    let gene = (t * per_type + k) % g;
                    p[gene] += cfg.marker_strength * rng.random_range(0.5..1.5);
                }
                p
            })
            .collect();
        let feat_proto = (0..cfg.n_types)
            .map(|_| (0..cfg.feature_dim).map(|_| gaussian(rng)).collect())
            .collect();
        let l = cfg.latent_dim.max(1) as f64;
        let expr_latent = (0..cfg.n_types)
            .map(|_| {
                (0..g)
                    .map(|_| (0..cfg.latent_dim).map(|_| gaussian(rng) / l.sqrt()).collect())
                    .collect()
            })
            .collect();
        let feat_latent = (0..cfg.feature_dim)
            .map(|_| (0..cfg.latent_dim).map(|_| gaussian(rng) / l.sqrt()).collect())
            .collect();
        let embed_map = (0..cfg.embed_dim)
            .map(|_| (0..g).map(|_| gaussian(rng) / (g as f64).sqrt()).collect())
            .collect();
        Self {
            base,
            expr_proto,
            feat_proto,
            expr_latent,
            feat_latent,
            embed_map,
        }
    }

    fn expression(&self, t: usize, s: &[f64], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.expr_proto[t]
            .iter()
            .zip(&self.expr_latent[t])
            .map(|(&p, a)| {
                let lat: f64 = a.iter().zip(s).map(|(x, y)| x * y).sum();
                (p + cfg.noise * (lat + gaussian(rng))).max(0.0)
            })
            .collect()
    }

    fn features(&self, t: usize, s: &[f64], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.feat_proto[t]
            .iter()
            .zip(&self.feat_latent)
            .map(|(&p, b)| {
                let lat: f64 = b.iter().zip(s).map(|(x, y)| x * y).sum();
                p + cfg.feature_noise * (lat + gaussian(rng))
            })
            .collect()
    }

    fn embedding(&self, y: &[f64], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.embed_map
            .iter()
            .map(|row| {
                let v: f64 = row.iter().zip(y).zip(&self.base).map(|((w, y), b)| w * (y - b)).sum();
                v + cfg.embed_noise * gaussian(rng)
            })
            .collect()
    }
}

/// f64 rows rounded through f32, the on-disk precision, so that in-memory
/// and reloaded datasets agree bit for bit.
fn to_matrix<T: Scalar>(rows: &[Vec<f64>], cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows.len(), cols, |i, j| T::of(rows[i][j] as f32 as f64))
}

pub fn generate<T: Scalar>(cfg: &SynthConfig) -> Result<SyntheticData<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(cfg, &mut rng);
    let k = cfg.n_types;
    let abundance: Vec<f64> = (0..k).map(|t| cfg.abundance_ratio.powi(t as i32)).collect();
    let latent = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..cfg.latent_dim).map(|_| gaussian(rng)).collect() };

    let mut spots = Vec::with_capacity(cfg.n_spots);
    let mut planted = Vec::with_capacity(cfg.n_spots);
    let (mut feats, mut exprs, mut embs) = (Vec::new(), Vec::new(), Vec::new());
    let two_s2 = 2.0 * cfg.patch_sigma * cfg.patch_sigma;
    for slide in 0..cfg.n_slides {
        let start = slide * cfg.n_spots / cfg.n_slides;
        let end = (slide + 1) * cfg.n_spots / cfg.n_slides;
        let patches: Vec<Vec<[f64; 2]>> = (0..k)
            .map(|_| {
                let n = rng.random_range(1..=3);
                (0..n)
                    .map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)])
                    .collect()
            })
            .collect();
        for i in start..end {
            let p = [rng.random::<f64>(), rng.random::<f64>()];
            let weights: Vec<f64> = (0..k)
                .map(|t| {
                    let density: f64 = patches[t]
                        .iter()
                        .map(|c| (-((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / two_s2).exp())
                        .sum();
                    abundance[t] * (density + 1e-3)
                })
                .collect();
            let t = draw(&weights, &mut rng);
            let s = latent(&mut rng);
            let y = model.expression(t, &s, cfg, &mut rng);
            feats.push(model.features(t, &s, cfg, &mut rng));
            embs.push(model.embedding(&y, cfg, &mut rng));
            exprs.push(y);
            planted.push(t);
            spots.push(SpotRecord {
                spot_id: i as u64,
                slide_id: slide as u32,
                x: p[0],
                y: p[1],
            });
        }
    }
    normalize_slide_coordinates(&mut spots);

    // reference cells follow the tissue's overall type mix
    let mut ref_weights = vec![0.0; k];
    planted.iter().for_each(|&t| ref_weights[t] += 1.0);
    let mut ref_types = Vec::with_capacity(cfg.n_reference);
    let mut ref_embs = Vec::with_capacity(cfg.n_reference);
    for j in 0..cfg.n_reference {
        // every type is represented before the rest are drawn uniformly
        let t = if j < k { j } else { draw(&ref_weights, &mut rng) };
        let s = latent(&mut rng);
        let y = model.expression(t, &s, cfg, &mut rng);
        ref_embs.push(model.embedding(&y, cfg, &mut rng));
        ref_types.push(t);
    }
    let type_names: Vec<String> = (0..k).map(|t| format!("type_{t}")).collect();
    // labels are re-derived by first appearance when the csv is read back
    let mut order = Vec::new();
    for &t in &ref_types {
        if !order.contains(&t) {
            order.push(t);
        }
    }
    let relabel: Vec<usize> = (0..k).map(|t| order.iter().position(|&o| o == t).expect("all types drawn")).collect();
    let reference = SingleCellReference::new(
        to_matrix(&ref_embs, cfg.embed_dim),
        ref_types.iter().map(|&t| relabel[t]).collect(),
        order.iter().map(|&t| type_names[t].clone()).collect(),
    )?;

    let dataset = Dataset::new(
        spots,
        to_matrix(&feats, cfg.feature_dim),
        to_matrix(&exprs, cfg.genes),
        Some(to_matrix(&embs, cfg.embed_dim)),
        reference,
    )?;
    Ok(SyntheticData {
        dataset,
        planted,
        type_names,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PlantedRow {
    spot_id: u64,
    type_id: usize,
    type_name: String,
}

/// Generates a dataset and writes the dataset directory, the planted types
/// and the generating config.
pub fn generate_to_dir(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<SyntheticData<f32>> {
    let dir = dir.as_ref();
    let data = generate::<f32>(cfg)?;
    data.dataset.save(dir)?;
    let path = dir.join(PLANTED_TYPES_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    for (spot, &t) in data.dataset.spots.iter().zip(&data.planted) {
        w.serialize(PlantedRow {
            spot_id: spot.spot_id,
            type_id: t,
            type_name: data.type_names[t].clone(),
        })
        .map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join(SYNTH_CONFIG_FILE);
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(data)
}

/// Reads `planted_types.csv` back as one type id per spot, in file order.
pub fn read_planted_types(dir: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = dir.as_ref().join(PLANTED_TYPES_FILE);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    rdr.deserialize::<PlantedRow>()
        .map(|r| {
            r.map(|row| row.type_id).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })
        })
        .collect()
}
