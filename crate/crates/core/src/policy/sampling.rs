//! Set sampling without replacement and its log-probability.
//!
//! The probability of an ordered pick sequence a₁…a_k is the product of the
//! renormalized probabilities at each step:
//! `π(S) = Π_t p(a_t) / Σ_{j ∉ {a₁…a_{t−1}}} p(j)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Draws `k` distinct positions sequentially, renormalizing the remaining
/// probability mass after each pick. Returns the picks in order and the sum
/// of log renormalized pick probabilities.
pub fn sample_set<T: Scalar, R: Rng + ?Sized>(probs: &[T], k: usize, rng: &mut R) -> Result<(Vec<usize>, T)> {
    let n = probs.len();
    if k > n {
        return Err(Error::Budget(format!("cannot pick {k} of {n} candidates")));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
        return Err(Error::Numeric("sampling probabilities must be finite and >= 0".into()));
    }
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(k);
    let mut log_prob = T::zero();
    for _ in 0..k {
        let mass: f64 = probs
            .iter()
            .zip(&taken)
            .filter(|(_, &t)| !t)
            .map(|(p, _)| p.as_f64())
            .sum();
        let pick = if mass > 0.0 {
            let target = rng.random::<f64>() * mass;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, p) in probs.iter().enumerate() {
                if taken[i] || *p <= T::zero() {
                    continue;
                }
                acc += p.as_f64();
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive mass has a candidate")
        } else {
            // all remaining mass underflowed; fall back to the first free slot
            taken.iter().position(|&t| !t).expect("k <= n")
        };
        let p = probs[pick].as_f64();
        log_prob += if mass > 0.0 && p > 0.0 {
            T::of((p / mass).ln())
        } else {
            T::neg_infinity()
        };
        taken[pick] = true;
        order.push(pick);
    }
    Ok((order, log_prob))
}

/// Log-probability of an ordered pick sequence under softmax(`scores`) with
/// sequential renormalization, and its gradient with respect to the scores.
pub fn sequential_log_prob<T: Scalar>(scores: &[T], order: &[usize]) -> Result<(T, Vec<T>)> {
    let n = scores.len();
    let mut removed = vec![false; n];
    let mut grad = vec![T::zero(); n];
    let mut total = T::zero();
    let mut weights = vec![T::zero(); n];
    for &a in order {
        if a >= n || removed[a] {
            return Err(Error::value(format!("pick {a} is out of range or repeated")));
        }
        let max = scores
            .iter()
            .zip(&removed)
            .filter(|(_, &r)| !r)
            .map(|(&s, _)| s)
            .fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for i in 0..n {
            weights[i] = if removed[i] { T::zero() } else { (scores[i] - max).exp() };
            z += weights[i];
        }
        total += scores[a] - max - z.ln();
        grad[a] += T::one();
        for i in 0..n {
            if !removed[i] {
                grad[i] -= weights[i] / z;
            }
        }
        removed[a] = true;
    }
    Ok((total, grad))
}
