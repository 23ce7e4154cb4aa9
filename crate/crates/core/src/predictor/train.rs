use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, SpotId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rewards::{assign_cell_types, batch_embeddings};
use crate::scalar::Scalar;

use super::layers::{dropout, Mlp2, Mlp2Grad, SgdStep};
use super::losses::{infonce_loss, total_loss, LossBreakdown, LossWeights};
use super::retrieval::{retrieve_soft_label, MemoryBank};

const REGRESSOR_STREAM: u64 = 0x52_4547;
const HEAD_STREAM: u64 = 0x48_4541_44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub lambda_kd: f64,
    pub m_threshold: f64,
    pub top_k: usize,
    pub top_t: usize,
    pub temperature: f64,
    pub hidden: usize,
    pub head_hidden: usize,
    pub head_dim: usize,
    /// Train the projection heads and retrieve soft labels. Off gives the
    /// plain regression path.
    pub retrieval: bool,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lr0: 1e-4,
            lr_min: 1e-6,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 256,
            epochs: 100,
            lambda_r: w.lambda_r,
            lambda_p: w.lambda_p,
            lambda_kd: w.lambda_kd,
            m_threshold: w.m_threshold,
            top_k: 50,
            top_t: 10,
            temperature: 0.07,
            hidden: 512,
            head_hidden: 256,
            head_dim: 256,
            retrieval: true,
            dropout_rate: 0.1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_r: self.lambda_r,
            lambda_p: self.lambda_p,
            lambda_kd: self.lambda_kd,
            m_threshold: self.m_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.top_t == 0 || self.top_k < self.top_t {
            return bad("retrieval needs top_k >= top_t >= 1");
        }
        if !(0.0..=1.0).contains(&self.m_threshold) {
            return bad("m_threshold must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.batch == 0 || self.hidden == 0 || self.head_hidden == 0 || self.head_dim == 0 {
            return bad("batch and layer widths must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        let nonneg = [
            self.lr0,
            self.lr_min,
            self.weight_decay,
            self.lambda_r,
            self.lambda_p,
            self.lambda_kd,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rates, weight decay and loss weights must be >= 0, momentum in [0, 1)");
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for `epoch` of `epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr0;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub contrastive: Option<f64>,
    pub loss: LossBreakdown,
    /// Fraction of pool spots whose retrieval cleared the confidence gate.
    pub gated: Option<f64>,
}

/// Regression network plus the two projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel<T> {
    pub regressor: Mlp2<T>,
    pub image_head: Mlp2<T>,
    pub expr_head: Mlp2<T>,
    pub config: TrainConfig,
    pub(crate) trained: bool,
}

impl<T: Scalar> PredictorModel<T> {
    pub fn untrained(feature_dim: usize, genes: usize, cfg: &TrainConfig) -> Self {
        let mut reg_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ REGRESSOR_STREAM);
        let mut head_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ HEAD_STREAM);
        Self {
            regressor: Mlp2::new(feature_dim, cfg.hidden, genes, &mut reg_rng),
            image_head: Mlp2::new(feature_dim, cfg.head_hidden, cfg.head_dim, &mut head_rng),
            expr_head: Mlp2::new(genes, cfg.head_hidden, cfg.head_dim, &mut head_rng),
            config: cfg.clone(),
            trained: false,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn feature_dim(&self) -> usize {
        self.regressor.input_dim()
    }

    pub fn genes(&self) -> usize {
        self.regressor.output_dim()
    }

    /// Regression output for each feature row.
    pub fn predict(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        if !self.trained {
            return Err(Error::State("predict called on an untrained model".into()));
        }
        self.regressor.forward(features)
    }

    /// One stochastic pass with inverted dropout on the input features.
    pub fn predict_dropout<R: Rng + ?Sized>(&self, features: &[T], rate: f64, rng: &mut R) -> Result<Vec<T>> {
        if !self.trained {
            return Err(Error::State("dropout pass on an untrained model".into()));
        }
        let mut x = features.to_vec();
        dropout(&mut x, rate, rng);
        let x = Matrix::new(1, x.len(), x)?;
        Ok(self.regressor.forward(&x)?.into_data())
    }
}

/// Loss and parameter gradient of the regression network on one batch.
pub fn regression_loss_and_grad<T: Scalar>(
    net: &Mlp2<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    retrieval: Option<(&Matrix<T>, &[f64])>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Mlp2Grad<T>)> {
    let cache = net.forward_cached(x.clone())?;
    let (loss, g) = total_loss(y, &cache.output, retrieval, w)?;
    Ok((loss, net.backward(&cache, &g)?))
}

fn sgd(cfg: &TrainConfig, lr: f64) -> SgdStep<f64> {
    SgdStep {
        lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    }
}

fn cast_step<T: Scalar>(s: SgdStep<f64>) -> SgdStep<T> {
    SgdStep {
        lr: T::of(s.lr),
        momentum: T::of(s.momentum),
        weight_decay: T::of(s.weight_decay),
    }
}

/// Trains a fresh model on `pool`, which must already be revealed.
pub fn train<T: Scalar>(ds: &Dataset<T>, pool: &[SpotId], cfg: &TrainConfig) -> Result<(PredictorModel<T>, Vec<EpochLog>)> {
    let mut model = PredictorModel::untrained(ds.feature_dim(), ds.gene_count(), cfg);
    let log = continue_training(&mut model, ds, pool, 0..cfg.epochs)?;
    Ok((model, log))
}

/// Runs `epochs` (indices into the cosine schedule) on `pool`. Used directly
/// when training is interleaved with sampling.
pub fn continue_training<T: Scalar>(
    model: &mut PredictorModel<T>,
    ds: &Dataset<T>,
    pool: &[SpotId],
    epochs: std::ops::Range<usize>,
) -> Result<Vec<EpochLog>> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::State("cannot train on an empty pool".into()));
    }
    if let Some(id) = pool.iter().find(|&&id| !ds.is_revealed(id)) {
        return Err(Error::State(format!("pool spot {id} has not been revealed")));
    }
    let rows = ds.rows_of(pool)?;
    let batch = ds.reveal(pool)?;
    let x = ds.features.select_rows(&rows);
    let y = batch.expressions.clone();
    let w = cfg.loss_weights();
    let n = rows.len();

    let types = if cfg.retrieval {
        let z = batch_embeddings(&batch, ds.reference.embeddings.cols());
        assign_cell_types(&z, &ds.reference)?
    } else {
        Vec::new()
    };
    if cfg.retrieval && cfg.top_k >= n {
        warn!("retrieval K={} clipped to {} bank entries", cfg.top_k, n.saturating_sub(1));
    }

    // stream 0 initializes; shuffling uses a stream keyed by the first epoch so
    // resumed training stays deterministic
    let mut reg_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ REGRESSOR_STREAM);
    reg_rng.set_stream(1 + epochs.start as u64);
    let mut head_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ HEAD_STREAM);
    head_rng.set_stream(1 + epochs.start as u64);
    let mut order: Vec<usize> = (0..n).collect();
    let mut logs = Vec::with_capacity(epochs.len());

    for epoch in epochs {
        let lr = cfg.lr_at(epoch);
        let step: SgdStep<T> = cast_step(sgd(&cfg, lr));
        let mut contrastive = None;
        let mut retrieved = None;
        let mut gated = None;

        if cfg.retrieval {
            order.shuffle(&mut head_rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let img = model.image_head.forward_cached(x.select_rows(chunk))?;
                let expr = model.expr_head.forward_cached(y.select_rows(chunk))?;
                let (l, ga, gb) = infonce_loss(&img.output, &expr.output, cfg.temperature)?;
                let g_img = model.image_head.backward(&img, &ga)?;
                let g_expr = model.expr_head.backward(&expr, &gb)?;
                if !(l.is_finite() && g_img.is_finite() && g_expr.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite contrastive gradient at epoch {epoch}")));
                }
                model.image_head.step(&g_img, &step);
                model.expr_head.step(&g_expr, &step);
                total += l.as_f64() * chunk.len() as f64;
            }
            contrastive = Some(total / n as f64);

            let bank = MemoryBank::new(&model.expr_head.forward(&y)?, y.clone(), types.clone())?;
            let queries = model.image_head.forward(&x)?;
            let mut soft = Matrix::zeros(n, y.cols());
            let mut sims = vec![0.0; n];
            for i in 0..n {
                // no eligible neighbor leaves the mask at 0
                if let Some(r) = retrieve_soft_label(queries.row(i), &bank, cfg.top_k, cfg.top_t, Some(i))? {
                    soft.row_mut(i).copy_from_slice(&r.soft_label);
                    sims[i] = r.mean_sim;
                }
            }
            gated = Some(sims.iter().filter(|&&s| s >= cfg.m_threshold).count() as f64 / n as f64);
            retrieved = Some((soft, sims));
        }

        // canonical order first so the shuffle depends only on the regressor rng
        order.sort_unstable();
        order.shuffle(&mut reg_rng);
        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch) {
            let xb = x.select_rows(chunk);
            let yb = y.select_rows(chunk);
            let rb = retrieved
                .as_ref()
                .map(|(s, m)| (s.select_rows(chunk), chunk.iter().map(|&i| m[i]).collect::<Vec<f64>>()));
            let (loss, grad) = regression_loss_and_grad(
                &model.regressor,
                &xb,
                &yb,
                rb.as_ref().map(|(s, m)| (s, m.as_slice())),
                &w,
            )?;
            if !(loss.total.is_finite() && grad.is_finite()) {
                return Err(Error::Numeric(format!("non-finite regression gradient at epoch {epoch}")));
            }
            model.regressor.step(&grad, &step);
            let f = chunk.len() as f64 / n as f64;
            acc.mse += f * loss.mse;
            acc.pcc += f * loss.pcc;
            acc.distill += f * loss.distill;
            acc.total += f * loss.total;
        }
        if !model.regressor.parameters_finite() {
            return Err(Error::Numeric(format!("regressor parameters non-finite after epoch {epoch}")));
        }
        debug!("epoch {epoch}: lr={lr:.2e} loss={:.5}", acc.total);
        logs.push(EpochLog {
            epoch,
            lr,
            contrastive,
            loss: acc,
            gated,
        });
    }
    model.trained = true;
    Ok(logs)
}
