//! Matrix-free operators, power-iteration norms and symmetric matrix functions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, norm2};

/// A real linear map `R^cols -> R^rows` given by its action and the action of its transpose.
pub trait LinearOperator: Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `y = A^T x`.
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]);

    fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows(), self.cols());
        let mut e = vec![0.0; self.cols()];
        let mut col = vec![0.0; self.rows()];
        for j in 0..self.cols() {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            for (i, v) in col.iter().enumerate() {
                m[(i, j)] = *v;
            }
            e[j] = 0.0;
        }
        m
    }
}

impl LinearOperator for DMatrix<f64> {
    fn rows(&self) -> usize {
        self.nrows()
    }

    fn cols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let r = self * DVector::from_column_slice(x);
        y.copy_from_slice(r.as_slice());
    }

    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        let r = self.tr_mul(&DVector::from_column_slice(x));
        y.copy_from_slice(r.as_slice());
    }

    fn to_dense(&self) -> DMatrix<f64> {
        self.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    /// Relative residual tolerance `‖A^T A x − θ x‖ ≤ tol θ`.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Largest dimension for which a dense decomposition is used as fallback.
    pub dense_limit: usize,
}

impl PowerConfig {
    pub fn with_tol(tol: f64) -> Self {
        PowerConfig {
            tol,
            ..Default::default()
        }
    }
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            tol: 1e-9,
            max_iter: 20_000,
            seed: 0x5eed,
            dense_limit: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMethod {
    PowerIteration,
    DenseFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    pub iterations: usize,
    pub method: NormMethod,
}

/// Largest singular value of `op`.
///
/// Power iteration on `A^T A` from a seeded random start; when the residual test
/// fails within the iteration cap the dense SVD is used if the operator is small.
pub fn spectral_norm(op: &dyn LinearOperator, cfg: &PowerConfig) -> Result<NormEstimate> {
    let (m, n) = (op.rows(), op.cols());
    if m == 0 || n == 0 {
        return Ok(NormEstimate {
            value: 0.0,
            iterations: 0,
            method: NormMethod::PowerIteration,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut ax = vec![0.0; m];
    let mut z = vec![0.0; n];
    for it in 1..=cfg.max_iter {
        op.apply(&x, &mut ax);
        op.apply_transpose(&ax, &mut z);
        let theta = dot(&x, &z);
        let zn = norm2(&z);
        if zn == 0.0 || theta <= 0.0 {
            if zn == 0.0 && it == 1 {
                // Random start in the kernel: the operator is zero with probability one.
                return Ok(NormEstimate {
                    value: 0.0,
                    iterations: it,
                    method: NormMethod::PowerIteration,
                });
            }
            break;
        }
        let resid = z
            .iter()
            .zip(&x)
            .map(|(zi, xi)| (zi - theta * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        if resid <= cfg.tol * theta {
            return Ok(NormEstimate {
                value: theta.sqrt(),
                iterations: it,
                method: NormMethod::PowerIteration,
            });
        }
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi = zi / zn;
        }
    }
    if m.max(n) <= cfg.dense_limit {
        return Ok(NormEstimate {
            value: dense_spectral_norm(&op.to_dense()),
            iterations: cfg.max_iter,
            method: NormMethod::DenseFallback,
        });
    }
    Err(Error::NonConvergence(format!(
        "power iteration on a {m}x{n} operator after {} steps",
        cfg.max_iter
    )))
}

pub fn dense_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().iter().fold(0.0f64, |a, b| a.max(*b))
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.last().copied().unwrap_or(0.0)
}

/// `f(M)` for symmetric positive-definite `M`; rejects eigenvalues at or below `1e-12 · trace`.
pub fn spd_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(m);
    let trace: f64 = vals.iter().sum();
    let floor = 1e-12 * trace.abs();
    if let Some(v) = vals.iter().find(|v| **v <= floor) {
        return Err(Error::Degenerate(format!(
            "eigenvalue {v:e} below the floor {floor:e} (trace {trace:e})"
        )));
    }
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        vals.len(),
        vals.iter().map(|v| f(*v)),
    ));
    Ok(&vecs * d * vecs.transpose())
}

pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_function(m, f64::sqrt)
}

pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_function(m, |v| 1.0 / v.sqrt())
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_function(m, |v| 1.0 / v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_operator_has_zero_norm() {
        let z = DMatrix::<f64>::zeros(5, 3);
        assert_eq!(spectral_norm(&z, &PowerConfig::default()).unwrap().value, 0.0);
    }

    #[test]
    fn diagonal_norm() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -3.0, 2.0]));
        let est = spectral_norm(&m, &PowerConfig::default()).unwrap();
        assert!((est.value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_top_singular_value_converges() {
        let m = DMatrix::<f64>::identity(6, 6) * 2.5;
        let est = spectral_norm(&m, &PowerConfig::default()).unwrap();
        assert_eq!(est.method, NormMethod::PowerIteration);
        assert!((est.value - 2.5).abs() < 1e-12);
    }

    #[test]
    fn fallback_on_tiny_iteration_cap() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.999]);
        let cfg = PowerConfig {
            max_iter: 2,
            ..Default::default()
        };
        let est = spectral_norm(&m, &cfg).unwrap();
        assert_eq!(est.method, NormMethod::DenseFallback);
        assert!((est.value - 1.0).abs() < 1e-14);
        let cfg = PowerConfig {
            max_iter: 2,
            dense_limit: 1,
            ..Default::default()
        };
        assert!(matches!(spectral_norm(&m, &cfg), Err(Error::NonConvergence(_))));
    }

    #[test]
    fn spd_functions() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = spd_sqrt(&m).unwrap();
        assert!((&s * &s - &m).norm() < 1e-12);
        let i = spd_inv_sqrt(&m).unwrap();
        assert!((&s * &i - DMatrix::identity(2, 2)).norm() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(spd_sqrt(&bad).is_err());
    }

    proptest! {
        #[test]
        fn power_iteration_matches_dense_svd(
            rows in 1usize..12, cols in 1usize..12,
            entries in prop::collection::vec(-5.0f64..5.0, 144),
            seed in any::<u64>(),
        ) {
            let m = DMatrix::from_iterator(rows, cols, entries.into_iter().take(rows * cols));
            let cfg = PowerConfig { seed, ..Default::default() };
            let est = spectral_norm(&m, &cfg).unwrap().value;
            let exact = dense_spectral_norm(&m);
            prop_assert!((est - exact).abs() <= 1e-8 * exact.max(1e-300));
        }
    }
}
