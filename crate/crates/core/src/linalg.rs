//! Small dense linear-algebra helpers shared by the prior and the sampler.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as exact zeros.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Relative diagonal jitter added when a precision matrix fails to factor.
pub const CHOLESKY_JITTER: f64 = 1e-10;

/// Symmetric spectral factor `F` (n x rank) with `F F' = sigma`, dropping
/// eigen-directions whose eigenvalue is below [`EIGEN_FLOOR`] (with a
/// relative allowance for eigensolver rounding).
pub fn spectral_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    if sigma.ncols() != n {
        return Err(Error::Config(format!(
            "covariance must be square, got {}x{}",
            n,
            sigma.ncols()
        )));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("covariance entries must be finite".into()));
    }
    let scale = sigma.amax().max(1.0);
    if (sigma - sigma.transpose()).amax() > 1e-9 * scale {
        return Err(Error::Config("covariance is not symmetric".into()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = sigma.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -1e-9 * scale {
        return Err(Error::Config(format!(
            "covariance is not positive semi-definite (eigenvalue {min:e})"
        )));
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] >= EIGEN_FLOOR * (1.0 - 1e-9))
        .collect();
    let mut f = DMatrix::zeros(n, keep.len());
    for (col, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for r in 0..n {
            f[(r, col)] = s * eig.eigenvectors[(r, i)];
        }
    }
    Ok(f)
}

/// Cholesky factor of a symmetric positive-definite matrix, retrying once
/// with a small diagonal jitter.
pub fn cholesky_with_jitter(p: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = Cholesky::new(p.clone()) {
        return Ok(ch);
    }
    let n = p.nrows().max(1);
    let jitter = CHOLESKY_JITTER * (p.trace().abs() / n as f64).max(1.0);
    let mut q = p.clone();
    for i in 0..p.nrows() {
        q[(i, i)] += jitter;
    }
    Cholesky::new(q).ok_or_else(|| {
        Error::Numerical("precision matrix is not positive definite after jitter".into())
    })
}

pub fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Draw from `N(mean, P^{-1})` given the Cholesky factor `L` of `P`:
/// `x = mean + L'^{-1} eps`.
pub fn sample_with_precision<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
) -> DVector<f64> {
    let eps = standard_normal_vector(rng, mean.len());
    let offset = chol
        .l()
        .transpose()
        .solve_upper_triangular(&eps)
        .expect("cholesky factor has a positive diagonal");
    mean + offset
}

/// Log-density of `N(x; mean, P^{-1})` given the Cholesky factor of `P`.
pub fn log_density_with_precision(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
) -> f64 {
    let diff = x - mean;
    let lt_diff = chol.l().transpose() * &diff;
    let log_det_p: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let k = x.len() as f64;
    -0.5 * k * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det_p - 0.5 * lt_diff.norm_squared()
}

/// Moore-Penrose solve `F z = v` for a full-column-rank factor.
pub fn factor_coordinates(factor: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    if factor.ncols() == 0 {
        return DVector::zeros(0);
    }
    let gram = factor.transpose() * factor;
    let rhs = factor.transpose() * v;
    gram.cholesky()
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(factor.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factor_reproduces_covariance() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.7]);
        let f = spectral_factor(&a).unwrap();
        assert_eq!(f.ncols(), 3);
        assert!((&f * f.transpose() - &a).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_and_zero_covariances() {
        let v = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let a = &v * v.transpose();
        let f = spectral_factor(&a).unwrap();
        assert_eq!(f.ncols(), 1);
        assert!((&f * f.transpose() - &a).amax() < 1e-12);
        assert_eq!(spectral_factor(&DMatrix::zeros(4, 4)).unwrap().ncols(), 0);
        assert_eq!(spectral_factor(&(DMatrix::identity(4, 4) * 1e-13)).unwrap().ncols(), 0);
    }

    #[test]
    fn rejects_invalid_covariances() {
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(spectral_factor(&neg), Err(Error::Config(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(spectral_factor(&asym), Err(Error::Config(_))));
    }

    #[test]
    fn precision_sampling_moments() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let cov = p.clone().try_inverse().unwrap();
        let ch = cholesky_with_jitter(&p).unwrap();
        let mean = DVector::from_vec(vec![1.0, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut acc = DMatrix::zeros(2, 2);
        let mut m = DVector::zeros(2);
        for _ in 0..n {
            let x = sample_with_precision(&mut rng, &mean, &ch);
            m += &x;
            let d = &x - &mean;
            acc += &d * d.transpose();
        }
        m /= n as f64;
        acc /= n as f64;
        assert!((m - mean).amax() < 0.01);
        assert!((acc - cov).amax() < 0.01);
    }

    #[test]
    fn log_density_matches_closed_form() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let ch = cholesky_with_jitter(&p).unwrap();
        let x = DVector::from_vec(vec![0.4, -0.2]);
        let mean = DVector::from_vec(vec![0.1, 0.1]);
        let d = &x - &mean;
        let quad = (d.transpose() * &p * &d)[(0, 0)];
        let expected = -(2.0 * std::f64::consts::PI).ln() + 0.5 * p.determinant().ln() - 0.5 * quad;
        assert!((log_density_with_precision(&x, &mean, &ch) - expected).abs() < 1e-12);
    }
}
