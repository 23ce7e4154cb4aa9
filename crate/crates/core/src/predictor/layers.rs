use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// SGD hyperparameters for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdStep<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> SgdStep<T> {
    /// `v ← μv + (g + λθ)`, `θ ← θ − lr·v`.
    #[inline]
    fn apply(&self, p: &mut [T], v: &mut [T], g: &[T]) {
        for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= self.lr * *v;
        }
    }
}

/// Affine map `x ↦ W x + b` on row batches, with momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// out×in.
    pub w: Matrix<T>,
    pub b: Vec<T>,
    v_w: Matrix<T>,
    v_b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let a = 1.0 / (input.max(1) as f64).sqrt();
        let w = Matrix::from_fn(output, input, |_, _| T::of(rng.random_range(-a..=a)));
        Self::from_parts(w, vec![T::zero(); output])
    }

    pub fn from_parts(w: Matrix<T>, b: Vec<T>) -> Self {
        assert_eq!(w.rows(), b.len(), "bias length");
        let (o, i) = w.shape();
        Self {
            w,
            b,
            v_w: Matrix::zeros(o, i),
            v_b: vec![T::zero(); o],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "layer expects {}-wide input, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut out = x.matmul_t(&self.w)?;
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&self.b) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Parameter gradients and, when asked, the gradient with respect to `x`.
    pub fn backward(&self, x: &Matrix<T>, grad_out: &Matrix<T>, need_input: bool) -> Result<(LinearGrad<T>, Option<Matrix<T>>)> {
        let w = grad_out.t_matmul(x)?;
        let mut b = vec![T::zero(); self.output_dim()];
        for row in grad_out.iter_rows() {
            for (acc, &g) in b.iter_mut().zip(row) {
                *acc += g;
            }
        }
        let gx = if need_input {
            Some(grad_out.matmul(&self.w)?)
        } else {
            None
        };
        Ok((LinearGrad { w, b }, gx))
    }

    pub fn step(&mut self, g: &LinearGrad<T>, opt: &SgdStep<T>) {
        opt.apply(self.w.data_mut(), self.v_w.data_mut(), g.w.data());
        opt.apply(&mut self.b, &mut self.v_b, &g.b);
    }

    pub fn parameter_count(&self) -> usize {
        self.w.data().len() + self.b.len()
    }

    pub(crate) fn write_parameters(&self, out: &mut Vec<T>) {
        out.extend_from_slice(self.w.data());
        out.extend_from_slice(&self.b);
    }

    pub(crate) fn read_parameters(&mut self, flat: &[T]) -> usize {
        let nw = self.w.data().len();
        self.w.data_mut().copy_from_slice(&flat[..nw]);
        let nb = self.b.len();
        self.b.copy_from_slice(&flat[nw..nw + nb]);
        nw + nb
    }
}

impl<T: Scalar> LinearGrad<T> {
    pub(crate) fn write(&self, out: &mut Vec<T>) {
        out.extend_from_slice(self.w.data());
        out.extend_from_slice(&self.b);
    }

    pub fn is_finite(&self) -> bool {
        self.w.first_non_finite().is_none() && self.b.iter().all(|v| v.is_finite())
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Mlp2Cache<T> {
    pub input: Matrix<T>,
    pub hidden: Matrix<T>,
    pub output: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2Grad<T> {
    pub l1: LinearGrad<T>,
    pub l2: LinearGrad<T>,
}

impl<T: Scalar> Mlp2Grad<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.l1.write(&mut out);
        self.l2.write(&mut out);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.l1.is_finite() && self.l2.is_finite()
    }
}

impl<T: Scalar> Mlp2<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let l1 = Linear::new(input, hidden, rng);
        let l2 = Linear::new(hidden, output, rng);
        Self { l1, l2 }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.l1.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.l2.output_dim()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_cached(x.clone())?.output)
    }

    pub fn forward_cached(&self, x: Matrix<T>) -> Result<Mlp2Cache<T>> {
        let hidden = self.l1.forward(&x)?.map(|v| v.max(T::zero()));
        let output = self.l2.forward(&hidden)?;
        Ok(Mlp2Cache {
            input: x,
            hidden,
            output,
        })
    }

    pub fn backward(&self, cache: &Mlp2Cache<T>, grad_out: &Matrix<T>) -> Result<Mlp2Grad<T>> {
        let (g2, gh) = self.l2.backward(&cache.hidden, grad_out, true)?;
        let mut gh = gh.expect("requested");
        // ReLU: hidden == 0 exactly where the pre-activation was <= 0
        for (g, &h) in gh.data_mut().iter_mut().zip(cache.hidden.data()) {
            if h <= T::zero() {
                *g = T::zero();
            }
        }
        let (g1, _) = self.l1.backward(&cache.input, &gh, false)?;
        Ok(Mlp2Grad { l1: g1, l2: g2 })
    }

    pub fn step(&mut self, g: &Mlp2Grad<T>, opt: &SgdStep<T>) {
        self.l1.step(&g.l1, opt);
        self.l2.step(&g.l2, opt);
    }

    /// Flattened parameters in the order l1.w, l1.b, l2.w, l2.b.
    pub fn parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.l1.write_parameters(&mut out);
        self.l2.write_parameters(&mut out);
        out
    }

    pub fn set_parameters(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.parameter_count(), "parameter count");
        let used = self.l1.read_parameters(flat);
        self.l2.read_parameters(&flat[used..]);
    }

    pub fn parameter_count(&self) -> usize {
        self.l1.parameter_count() + self.l2.parameter_count()
    }

    pub fn parameters_finite(&self) -> bool {
        self.parameters().iter().all(|v| v.is_finite())
    }
}

/// Inverted dropout: each entry is zeroed with probability `rate`, survivors
/// are scaled by `1/(1 − rate)`.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(x: &mut [T], rate: f64, rng: &mut R) {
    if rate <= 0.0 {
        return;
    }
    let keep = T::of(1.0 / (1.0 - rate));
    for v in x.iter_mut() {
        if rng.random::<f64>() < rate {
            *v = T::zero();
        } else {
            *v *= keep;
        }
    }
}
