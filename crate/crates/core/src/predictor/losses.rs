//! Training objectives and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::numerics::COSINE_ZERO_NORM;
use crate::scalar::Scalar;

/// Weights of the three regression-loss terms and the distillation gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub lambda_kd: f64,
    pub m_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_p: 0.25,
            lambda_kd: 0.25,
            m_threshold: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Unweighted mean squared error.
    pub mse: f64,
    /// Unweighted mean of `1 − PCC`.
    pub pcc: f64,
    /// Distillation term, already weighted by `λ_KD` and the confidence mask.
    pub distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combines unweighted MSE and PCC terms with an already-weighted
    /// distillation term.
    pub fn compose(mse: f64, pcc: f64, distill: f64, w: &LossWeights) -> Self {
        Self {
            mse,
            pcc,
            distill,
            total: w.lambda_r * mse + w.lambda_p * pcc + distill,
        }
    }
}

/// Confidence weight for distillation: the mean retrieval similarity when it
/// clears the threshold, otherwise 0.
#[inline]
pub fn confidence_mask(mean_sim: f64, threshold: f64) -> f64 {
    if mean_sim >= threshold {
        mean_sim
    } else {
        0.0
    }
}

/// `λ_KD · m · ‖ŷ − ŷ_ret‖² / G` for one spot.
pub fn distill_loss<T: Scalar>(y_hat: &[T], y_ret: &[T], mean_sim: f64, w: &LossWeights) -> Result<f64> {
    if y_hat.len() != y_ret.len() {
        return Err(Error::dim("prediction and soft label widths differ"));
    }
    let m = confidence_mask(mean_sim, w.m_threshold);
    if m == 0.0 || w.lambda_kd == 0.0 {
        return Ok(0.0);
    }
    let sq: f64 = y_hat
        .iter()
        .zip(y_ret)
        .map(|(&a, &b)| (a - b).as_f64().powi(2))
        .sum();
    Ok(w.lambda_kd * m * sq / y_hat.len() as f64)
}

/// Pearson correlation of two vectors with its gradient in `b`. A constant
/// vector gives correlation 0 and zero gradient.
pub fn pearson_with_grad<T: Scalar>(a: &[T], b: &[T]) -> (T, Vec<T>) {
    let n = T::of_usize(a.len());
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let ca: Vec<T> = a.iter().map(|&v| v - ma).collect();
    let cb: Vec<T> = b.iter().map(|&v| v - mb).collect();
    let na = dot(&ca, &ca).sqrt();
    let nb = dot(&cb, &cb).sqrt();
    let tiny = T::of(COSINE_ZERO_NORM);
    if na < tiny || nb < tiny {
        return (T::zero(), vec![T::zero(); a.len()]);
    }
    let r = (dot(&ca, &cb) / (na * nb)).max(-T::one()).min(T::one());
    // centered inputs make the centering Jacobian drop out
    let grad = ca
        .iter()
        .zip(&cb)
        .map(|(&x, &y)| x / (na * nb) - r * y / (nb * nb))
        .collect();
    (r, grad)
}

/// Mean over rows of `1 − PCC(y_i, ŷ_i)` across genes.
pub fn pcc_loss<T: Scalar>(y: &Matrix<T>, y_hat: &Matrix<T>) -> Result<T> {
    check_same_shape(y, y_hat)?;
    if y.cols() < 2 {
        return Err(Error::dim("correlation loss needs at least two genes"));
    }
    if y.rows() == 0 {
        return Ok(T::zero());
    }
    let total: T = y
        .iter_rows()
        .zip(y_hat.iter_rows())
        .map(|(a, b)| T::one() - pearson_with_grad(a, b).0)
        .sum();
    Ok(total / T::of_usize(y.rows()))
}

fn check_same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Batch objective `λ_r·MSE + λ_p·(1 − PCC) + λ_KD·m·‖ŷ − ŷ_ret‖²/G`, every
/// term averaged over rows, and its gradient with respect to `ŷ`.
/// `y_ret`/`mean_sim` may be `None` for a run without retrieval.
pub fn total_loss<T: Scalar>(
    y: &Matrix<T>,
    y_hat: &Matrix<T>,
    retrieval: Option<(&Matrix<T>, &[f64])>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Matrix<T>)> {
    check_same_shape(y, y_hat)?;
    let (n, g) = y.shape();
    if n == 0 {
        return Err(Error::dim("empty batch"));
    }
    if w.lambda_p != 0.0 && g < 2 {
        return Err(Error::dim("correlation loss needs at least two genes"));
    }
    if let Some((r, sims)) = retrieval {
        check_same_shape(y, r)?;
        if sims.len() != n {
            return Err(Error::dim("one similarity per row required"));
        }
    }
    let inv_n = 1.0 / n as f64;
    let inv_ng = inv_n / g as f64;
    let mut grad = Matrix::zeros(n, g);
    let (mut mse, mut pcc, mut distill) = (0.0f64, 0.0f64, 0.0f64);
    let c_mse = T::of(2.0 * w.lambda_r * inv_ng);
    let c_pcc = T::of(w.lambda_p * inv_n);
    for i in 0..n {
        let (yi, pi) = (y.row(i), y_hat.row(i));
        let gi = grad.row_mut(i);
        for ((gv, &a), &b) in gi.iter_mut().zip(yi).zip(pi) {
            let d = b - a;
            mse += d.as_f64() * d.as_f64();
            *gv = c_mse * d;
        }
        if w.lambda_p != 0.0 {
            let (r, dr) = pearson_with_grad(yi, pi);
            pcc += 1.0 - r.as_f64();
            for (gv, &d) in gi.iter_mut().zip(&dr) {
                *gv -= c_pcc * d;
            }
        } else if g >= 2 {
            pcc += 1.0 - pearson_with_grad(yi, pi).0.as_f64();
        }
        if let Some((r, sims)) = retrieval {
            let m = confidence_mask(sims[i], w.m_threshold);
            if m != 0.0 && w.lambda_kd != 0.0 {
                let c = T::of(2.0 * w.lambda_kd * m * inv_ng);
                let mut sq = 0.0;
                for ((gv, &a), &b) in gi.iter_mut().zip(pi).zip(r.row(i)) {
                    let d = a - b;
                    sq += d.as_f64() * d.as_f64();
                    *gv += c * d;
                }
                distill += w.lambda_kd * m * sq / g as f64;
            }
        }
    }
    let mse = mse * inv_ng;
    let pcc = pcc * inv_n;
    let distill = distill * inv_n;
    Ok((LossBreakdown::compose(mse, pcc, distill, w), grad))
}

/// Symmetric InfoNCE over cosine-similarity logits `cos(a_i, b_j)/τ`, with
/// gradients for both inputs. Row `i` of `a` is paired with row `i` of `b`.
pub fn infonce_loss<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, tau: f64) -> Result<(T, Matrix<T>, Matrix<T>)> {
    check_same_shape(a, b)?;
    let n = a.rows();
    if n == 0 {
        return Err(Error::dim("empty batch"));
    }
    let (ua, na) = normalize_rows(a);
    let (ub, nb) = normalize_rows(b);
    let inv_tau = T::of(1.0 / tau);
    let logits = ua.matmul_t(&ub)?.map(|v| v * inv_tau);

    // dL/dlogits, accumulated from the row-wise and column-wise cross-entropies
    let half_n = T::of(0.5 / n as f64);
    let mut g = Matrix::zeros(n, n);
    let mut loss = T::zero();
    for i in 0..n {
        let row = logits.row(i);
        let (lse, p) = log_softmax(row.iter().copied());
        loss += lse - row[i];
        for (j, pj) in p.into_iter().enumerate() {
            let d = if i == j { pj - T::one() } else { pj };
            g.data_mut()[i * n + j] += half_n * d;
        }
    }
    for j in 0..n {
        let col = (0..n).map(|i| logits.get(i, j));
        let (lse, p) = log_softmax(col);
        loss += lse - logits.get(j, j);
        for (i, pi) in p.into_iter().enumerate() {
            let d = if i == j { pi - T::one() } else { pi };
            g.data_mut()[i * n + j] += half_n * d;
        }
    }
    let loss = loss * half_n;

    let g_ua = g.matmul(&ub)?.map(|v| v * inv_tau);
    let g_ub = g.t_matmul(&ua)?.map(|v| v * inv_tau);
    Ok((loss, unnormalize_grad(&ua, &na, &g_ua), unnormalize_grad(&ub, &nb, &g_ub)))
}

fn log_softmax<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> (T, Vec<T>) {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = xs.map(|x| (x - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    (max + z.ln(), e.into_iter().map(|v| v / z).collect())
}

/// Unit rows (zero rows stay zero) and the original norms.
pub(crate) fn normalize_rows<T: Scalar>(x: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let tiny = T::of(COSINE_ZERO_NORM);
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = out.row_mut(i);
        let nrm = dot(r, r).sqrt();
        if nrm < tiny {
            r.iter_mut().for_each(|v| *v = T::zero());
        } else {
            r.iter_mut().for_each(|v| *v /= nrm);
        }
        norms.push(nrm);
    }
    (out, norms)
}

/// Pulls a gradient on unit rows `u = x/‖x‖` back to `x`.
fn unnormalize_grad<T: Scalar>(u: &Matrix<T>, norms: &[T], gu: &Matrix<T>) -> Matrix<T> {
    let tiny = T::of(COSINE_ZERO_NORM);
    let mut out = Matrix::zeros(u.rows(), u.cols());
    for i in 0..u.rows() {
        if norms[i] < tiny {
            continue;
        }
        let (ui, gi) = (u.row(i), gu.row(i));
        let proj = dot(ui, gi);
        for ((o, &uv), &gv) in out.row_mut(i).iter_mut().zip(ui).zip(gi) {
            *o = (gv - proj * uv) / norms[i];
        }
    }
    out
}
