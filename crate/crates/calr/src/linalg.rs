//! Small dense linear-algebra helpers shared by the operator modules:
//! real-matrix/complex-vector products, power-iteration spectral norms,
//! a complex LU with transpose solves (needed by the Hager condition
//! estimator), and Neville extrapolation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is singular at pivot {0}")]
    Singular(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// y = M x for a real matrix and a complex vector, via two real gemvs.
pub fn real_mat_complex_vec(m: &DMatrix<f64>, x: &DVector<Complex64>) -> DVector<Complex64> {
    assert_eq!(m.ncols(), x.len());
    let xr = DVector::from_iterator(x.len(), x.iter().map(|c| c.re));
    let xi = DVector::from_iterator(x.len(), x.iter().map(|c| c.im));
    let yr = m * xr;
    let yi = m * xi;
    DVector::from_iterator(
        m.nrows(),
        yr.iter()
            .zip(yi.iter())
            .map(|(&r, &i)| Complex64::new(r, i)),
    )
}

/// Deterministic start vector for power iterations (no RNG, reproducible runs).
fn seed_vector(n: usize) -> DVector<f64> {
    let mut v = DVector::from_fn(n, |i, _| 1.0 / (1.0 + i as f64));
    v /= v.norm();
    v
}

/// Spectral norm ‖M‖₂ by power iteration on MᵀM.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let mut x = seed_vector(m.ncols());
    let mut sigma = 0.0_f64;
    for _ in 0..200 {
        let y = m * &x;
        let z = m.transpose() * y;
        let nz = z.norm();
        if nz == 0.0 {
            return 0.0;
        }
        let new_sigma = nz.sqrt();
        x = z / nz;
        if (new_sigma - sigma).abs() <= 1e-12 * new_sigma.max(1.0) {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

/// W-weighted operator norm ‖W^{1/2} M W^{-1/2}‖₂.
pub fn weighted_spectral_norm(m: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    spectral_norm(&similarity_scale(m, w))
}

/// W^{1/2} M W^{-1/2} for diagonal positive W.
pub fn similarity_scale(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    assert_eq!(m.nrows(), w.len());
    assert_eq!(m.ncols(), w.len());
    let ws: Vec<f64> = w.iter().map(|&x| x.sqrt()).collect();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * ws[i] / ws[j])
}

/// LU factorization with partial pivoting for dense complex systems.
///
/// Also provides solves with the transpose so that the Hager 1-norm
/// estimator can run off a single factorization.
pub struct ComplexLu {
    lu: DMatrix<Complex64>,
    piv: Vec<usize>,
    norm1: f64,
}

impl ComplexLu {
    pub fn new(a: DMatrix<Complex64>) -> Result<Self, LinalgError> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(LinalgError::DimensionMismatch(format!(
                "LU needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let norm1 = (0..n)
            .map(|j| a.column(j).iter().map(|c| c.norm()).sum::<f64>())
            .fold(0.0_f64, f64::max);
        let mut lu = a;
        let mut piv = Vec::with_capacity(n);
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].norm();
            for i in k + 1..n {
                let v = lu[(i, k)].norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                return Err(LinalgError::Singular(k));
            }
            if p != k {
                lu.swap_rows(k, p);
            }
            piv.push(p);
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let l = lu[(i, k)] / pivot;
                lu[(i, k)] = l;
                for j in k + 1..n {
                    let u = lu[(k, j)];
                    lu[(i, j)] -= l * u;
                }
            }
        }
        Ok(Self { lu, piv, norm1 })
    }

    pub fn dim(&self) -> usize {
        self.lu.nrows()
    }

    pub fn solve(&self, b: &DVector<Complex64>) -> DVector<Complex64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x = b.clone();
        for k in 0..n {
            x.swap_rows(k, self.piv[k]);
        }
        // Ly = Pb
        for k in 0..n {
            let xk = x[k];
            for i in k + 1..n {
                x[i] -= self.lu[(i, k)] * xk;
            }
        }
        // Ux = y
        for k in (0..n).rev() {
            x[k] /= self.lu[(k, k)];
            let xk = x[k];
            for i in 0..k {
                x[i] -= self.lu[(i, k)] * xk;
            }
        }
        x
    }

    /// Solves Aᵀ x = b (plain transpose, no conjugation).
    pub fn solve_transpose(&self, b: &DVector<Complex64>) -> DVector<Complex64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        // Aᵀ = Uᵀ Lᵀ Pᵀ: solve Uᵀ y = b, Lᵀ z = y, x = P⁻¹ᵀ z = Pᵀ-apply in reverse.
        let mut x = b.clone();
        for k in 0..n {
            let mut s = x[k];
            for i in 0..k {
                s -= self.lu[(i, k)] * x[i];
            }
            x[k] = s / self.lu[(k, k)];
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for i in k + 1..n {
                s -= self.lu[(i, k)] * x[i];
            }
            x[k] = s;
        }
        for k in (0..n).rev() {
            x.swap_rows(k, self.piv[k]);
        }
        x
    }

    /// Hager-style estimate of the 1-norm condition number.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 0.0;
        }
        let mut x = DVector::from_element(n, Complex64::new(1.0 / n as f64, 0.0));
        let mut est = 0.0_f64;
        for _ in 0..5 {
            let y = self.solve(&x);
            let y1: f64 = y.iter().map(|c| c.norm()).sum();
            let xi = DVector::from_iterator(
                n,
                y.iter().map(|c| {
                    if c.norm() > 0.0 {
                        c / c.norm()
                    } else {
                        Complex64::new(1.0, 0.0)
                    }
                }),
            );
            let z = self
                .solve_transpose(&xi.map(|c| c.conj()))
                .map(|c| c.conj());
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .map(|(j, c)| (j, c.norm()))
                .fold((0, 0.0), |acc, v| if v.1 > acc.1 { v } else { acc });
            if y1 <= est || zmax <= z.iter().map(|c| c.norm()).sum::<f64>() / n as f64 {
                est = est.max(y1);
                break;
            }
            est = y1;
            x = DVector::from_element(n, Complex64::new(0.0, 0.0));
            x[jmax] = Complex64::new(1.0, 0.0);
        }
        est * self.norm1
    }
}

/// Neville polynomial extrapolation of (xs, ys) to x = 0.
pub fn neville_extrapolate(xs: &[f64], ys: &[Complex64]) -> Complex64 {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    let mut t = ys.to_vec();
    let n = t.len();
    for m in 1..n {
        for i in 0..n - m {
            let denom = xs[i] - xs[i + m];
            t[i] = ((-xs[i + m]) * t[i] - (-xs[i]) * t[i + 1]) / denom;
        }
    }
    t[0]
}
