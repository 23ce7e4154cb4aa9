use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<T> {
    pub mean: Vec<T>,
    /// d×r, orthonormal columns ordered by descending explained variance.
    pub basis: Matrix<T>,
    pub explained_variance: Vec<T>,
}

impl<T: Scalar> PcaModel<T> {
    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.basis.rows()
    }

    /// Projects rows of `x` (n×d) onto the basis, giving n×r.
    pub fn project(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "PCA expects width {}, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut centered = x.clone();
        for i in 0..centered.rows() {
            for (v, &m) in centered.row_mut(i).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul(&self.basis)
    }

    pub fn reconstruct(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        let mut x = z.matmul_t(&self.basis)?;
        for i in 0..x.rows() {
            for (v, &m) in x.row_mut(i).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(x)
    }
}

/// Fits an r-dimensional PCA by eigendecomposition of the sample covariance.
///
/// The decomposition is deterministic, so no seed is needed. Each basis
/// column is sign-flipped so that its largest-magnitude entry is positive
/// (first such entry on ties).
pub fn pca_fit<T: Scalar>(x: &Matrix<T>, r: usize) -> Result<PcaModel<T>> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::dim(format!("PCA needs at least 2 rows, got {n}")));
    }
    if r > n.min(d) {
        return Err(Error::dim(format!("PCA target {r} exceeds min(n={n}, d={d})")));
    }
    let mean = x.column_means();
    let mut centered = x.clone();
    for i in 0..n {
        for (v, &m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered.t_matmul(&centered)?;
    let denom = T::of_usize(n - 1);
    cov.data_mut().iter_mut().for_each(|v| *v /= denom);

    let (values, vectors) = symmetric_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    // stable sort keeps index order among equal eigenvalues
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut basis = Matrix::zeros(d, r);
    let mut explained = Vec::with_capacity(r);
    for (c, &k) in order.iter().take(r).enumerate() {
        let mut col: Vec<T> = (0..d).map(|i| vectors.get(i, k)).collect();
        let mut best = 0;
        for i in 1..d {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < T::zero() {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        for (i, v) in col.into_iter().enumerate() {
            basis.set(i, c, v);
        }
        explained.push(values[k].max(T::zero()));
    }
    Ok(PcaModel {
        mean,
        basis,
        explained_variance: explained,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and a matrix whose columns are the matching eigenvectors.
pub fn symmetric_eigen<T: Scalar>(a: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut m = a.clone();
    let mut v = Matrix::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() });
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut total = T::zero();
        for i in 0..n {
            for j in 0..n {
                let x = m.get(i, j) * m.get(i, j);
                total += x;
                if i != j {
                    off += x;
                }
            }
        }
        if off <= eps * eps * total || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    let nkp = c * akp - s * akq;
                    let nkq = s * akp + c * akq;
                    m.set(k, p, nkp);
                    m.set(p, k, nkp);
                    m.set(k, q, nkq);
                    m.set(q, k, nkq);
                }
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, T::zero());
                m.set(q, p, T::zero());
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| m.get(i, i)).collect(), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn orthonormal_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_fn(50, 6, |_, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * (j + 1) as f64
        });
        let p = pca_fit(&x, 4).unwrap();
        let g = p.basis.t_matmul(&p.basis).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(i, j) - want).abs() < 1e-5);
            }
        }
        for w in p.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for c in 0..4 {
            let col: Vec<f64> = (0..6).map(|i| p.basis.get(i, c)).collect();
            let big = col.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn rank_one_line() {
        let x = Matrix::from_fn(20, 2, |i, j| {
            let t = i as f64 * 0.3 - 2.0;
            if j == 0 { t } else { 2.0 * t }
        });
        let p = pca_fit(&x, 1).unwrap();
        let back = p.reconstruct(&p.project(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn full_rank_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::from_fn(15, 5, |_, _| StandardNormal.sample(&mut rng));
        let p: PcaModel<f64> = pca_fit(&x, 5).unwrap();
        let back = p.reconstruct(&p.project(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn isotropic_variances_are_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::from_fn(10_000, 2, |_, _| StandardNormal.sample(&mut rng));
        let p: PcaModel<f64> = pca_fit(&x, 2).unwrap();
        let (a, b) = (p.explained_variance[0], p.explained_variance[1]);
        assert!((a - b).abs() / a < 0.2, "{a} {b}");
        assert!((a - 1.0).abs() < 0.1);
    }

    #[test]
    fn target_too_large() {
        let x = Matrix::<f64>::zeros(3, 2);
        assert!(matches!(pca_fit(&x, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn eigen_of_known_matrix() {
        let a = Matrix::from_rows(&[[2.0f64, 1.0], [1.0, 2.0]]).unwrap();
        let (mut vals, _) = symmetric_eigen(&a);
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12);
    }
}
