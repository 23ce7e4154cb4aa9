use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const POLICY_HIDDEN: usize = 128;

/// Scoring network `w2 · ReLU(W1 e + b1) + b2` with one velocity buffer per
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: T,
    v_w1: Matrix<T>,
    v_b1: Vec<T>,
    v_w2: Vec<T>,
    v_b2: T,
}

/// Parameter-shaped gradient (or update direction) for a [`PolicyNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: T,
}

impl<T: Scalar> PolicyGrad<T> {
    pub fn is_finite(&self) -> bool {
        self.w1.first_non_finite().is_none()
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.is_finite()
    }

    /// Flattened view in the order w1, b1, w2, b2.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = self.w1.data().to_vec();
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }
}

impl<T: Scalar> PolicyNet<T> {
    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self::with_hidden(input_dim, POLICY_HIDDEN, seed)
    }

    pub fn with_hidden(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = 1.0 / (input_dim.max(1) as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::from_fn(hidden, input_dim, |_, _| T::of(rng.random_range(-a1..=a1)));
        let w2 = (0..hidden).map(|_| T::of(rng.random_range(-a2..=a2))).collect();
        Self::from_parts(w1, vec![T::zero(); hidden], w2, T::zero())
    }

    /// Multiplies the output weights, e.g. to start close to uniform.
    pub fn scale_output(&mut self, factor: T) {
        self.w2.iter_mut().for_each(|w| *w *= factor);
    }

    pub fn from_parts(w1: Matrix<T>, b1: Vec<T>, w2: Vec<T>, b2: T) -> Self {
        let (h, d) = w1.shape();
        assert_eq!(b1.len(), h, "b1 length");
        assert_eq!(w2.len(), h, "w2 length");
        Self {
            w1,
            b1,
            w2,
            b2,
            v_w1: Matrix::zeros(h, d),
            v_b1: vec![T::zero(); h],
            v_w2: vec![T::zero(); h],
            v_b2: T::zero(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    fn pre_activations(&self, e: &Matrix<T>) -> Result<Matrix<T>> {
        if e.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "policy expects {}-wide features, got {}",
                self.input_dim(),
                e.cols()
            )));
        }
        let mut a = e.matmul_t(&self.w1)?;
        for i in 0..a.rows() {
            for (v, &b) in a.row_mut(i).iter_mut().zip(&self.b1) {
                *v += b;
            }
        }
        Ok(a)
    }

    /// One priority score per row of `e`.
    pub fn scores(&self, e: &Matrix<T>) -> Result<Vec<T>> {
        let a = self.pre_activations(e)?;
        Ok(a.iter_rows()
            .map(|row| {
                row.iter()
                    .zip(&self.w2)
                    .map(|(&x, &w)| if x > T::zero() { x * w } else { T::zero() })
                    .sum::<T>()
                    + self.b2
            })
            .collect())
    }

    /// Pulls `d(objective)/d(score_i)` back to the parameters.
    pub fn backward(&self, e: &Matrix<T>, grad_scores: &[T]) -> Result<PolicyGrad<T>> {
        let a = self.pre_activations(e)?;
        if grad_scores.len() != a.rows() {
            return Err(Error::dim("one score gradient per row required"));
        }
        let h = self.hidden();
        let mut g_w2 = vec![T::zero(); h];
        let mut g_b1 = vec![T::zero(); h];
        let mut delta = Matrix::zeros(a.rows(), h);
        for (i, &g) in grad_scores.iter().enumerate() {
            let row = a.row(i);
            let drow = delta.row_mut(i);
            for k in 0..h {
                if row[k] > T::zero() {
                    g_w2[k] += g * row[k];
                    let d = g * self.w2[k];
                    drow[k] = d;
                    g_b1[k] += d;
                }
            }
        }
        Ok(PolicyGrad {
            w1: delta.t_matmul(e)?,
            b1: g_b1,
            w2: g_w2,
            b2: grad_scores.iter().copied().sum(),
        })
    }

    /// `v ← momentum·v + scale·grad`, `θ ← θ + lr·v`.
    pub fn ascend(&mut self, grad: &PolicyGrad<T>, scale: T, lr: T, momentum: T) {
        let step = |v: &mut T, g: T, p: &mut T| {
            *v = momentum * *v + scale * g;
            *p += lr * *v;
        };
        for ((v, &g), p) in self
            .v_w1
            .data_mut()
            .iter_mut()
            .zip(grad.w1.data())
            .zip(self.w1.data_mut())
        {
            step(v, g, p);
        }
        for ((v, &g), p) in self.v_b1.iter_mut().zip(&grad.b1).zip(&mut self.b1) {
            step(v, g, p);
        }
        for ((v, &g), p) in self.v_w2.iter_mut().zip(&grad.w2).zip(&mut self.w2) {
            step(v, g, p);
        }
        step(&mut self.v_b2, grad.b2, &mut self.b2);
    }

    pub fn parameters(&self) -> Vec<T> {
        PolicyGrad {
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2,
        }
        .flatten()
    }

    pub fn set_parameters(&mut self, flat: &[T]) {
        let (h, d) = self.w1.shape();
        assert_eq!(flat.len(), h * d + 2 * h + 1, "parameter count");
        self.w1.data_mut().copy_from_slice(&flat[..h * d]);
        self.b1.copy_from_slice(&flat[h * d..h * d + h]);
        self.w2.copy_from_slice(&flat[h * d + h..h * d + 2 * h]);
        self.b2 = flat[h * d + 2 * h];
    }

    pub fn parameters_finite(&self) -> bool {
        self.parameters().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_scores_zero() {
        let net = PolicyNet::<f64>::from_parts(Matrix::zeros(128, 3), vec![0.0; 128], vec![0.0; 128], 0.0);
        let e = Matrix::from_fn(4, 3, |i, j| (i + j) as f64);
        assert_eq!(net.scores(&e).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn all_ones_scores_128() {
        let net = PolicyNet::<f64>::from_parts(Matrix::from_fn(128, 1, |_, _| 1.0), vec![0.0; 128], vec![1.0; 128], 0.0);
        let e = Matrix::from_rows(&[[1.0]]).unwrap();
        assert_eq!(net.scores(&e).unwrap(), vec![128.0]);
    }

    #[test]
    fn dead_relus_leave_bias() {
        let net = PolicyNet::<f64>::from_parts(Matrix::from_fn(128, 2, |_, _| -1.0), vec![-0.5; 128], vec![3.0; 128], 0.75);
        let e = Matrix::from_rows(&[[1.0, 2.0], [0.0, 0.0]]).unwrap();
        assert_eq!(net.scores(&e).unwrap(), vec![0.75, 0.75]);
    }

    #[test]
    fn width_mismatch() {
        let net = PolicyNet::<f32>::new(3, 0);
        assert!(matches!(net.scores(&Matrix::zeros(2, 4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = PolicyNet::<f64>::new(16, 7);
        let b = PolicyNet::<f64>::new(16, 7);
        assert_eq!(a, b);
        assert!(a.w1.data().iter().all(|w| w.abs() <= 0.25));
        assert!(a.b1.iter().all(|&b| b == 0.0));
    }
}
