//! Conjugate normal updates for a vector `x = mean + F z`, `z ~ N(0, I)`,
//! observed through linear maps with Gaussian noise.
//!
//! Working in `z` lets a rank-deficient prior covariance `F F'` confine the
//! posterior to its range without ever inverting it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, log_density_with_precision, sample_with_precision};

/// `y ≈ Q x` with noise precision `weight` on every row.
#[derive(Debug, Clone)]
pub struct LinearObservation {
    pub q: DMatrix<f64>,
    pub y: DVector<f64>,
    pub weight: f64,
}

impl LinearObservation {
    pub fn new(q: DMatrix<f64>, y: DVector<f64>, weight: f64) -> Result<Self> {
        if q.nrows() != y.len() {
            return Err(Error::shape(q.nrows(), y.len()));
        }
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::Domain(format!("observation precision must be non-negative, got {weight}")));
        }
        Ok(LinearObservation { q, y, weight })
    }
}

/// Posterior of `z` given the observations.
#[derive(Debug, Clone)]
pub struct FactorPosterior {
    prior_mean: DVector<f64>,
    factor: DMatrix<f64>,
    /// `(Q F)' W` per observation, kept so the mean can be recomputed for
    /// shifted targets.
    projected: Vec<(DMatrix<f64>, f64)>,
    chol: Cholesky<f64, Dyn>,
    mean_z: DVector<f64>,
}

impl FactorPosterior {
    pub fn new(
        prior_mean: &DVector<f64>,
        factor: &DMatrix<f64>,
        observations: &[LinearObservation],
    ) -> Result<Self> {
        let dim = prior_mean.len();
        if factor.nrows() != dim {
            return Err(Error::shape(dim, factor.nrows()));
        }
        let rank = factor.ncols();
        let mut precision = DMatrix::identity(rank, rank);
        let mut projected = Vec::with_capacity(observations.len());
        for obs in observations {
            if obs.q.ncols() != dim {
                return Err(Error::shape(dim, obs.q.ncols()));
            }
            let qf = &obs.q * factor;
            precision += qf.tr_mul(&qf) * obs.weight;
            projected.push((qf.transpose(), obs.weight));
        }
        if precision.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("posterior precision is not finite".into()));
        }
        let chol = cholesky_with_jitter(&precision)?;
        let mut post = FactorPosterior {
            prior_mean: prior_mean.clone(),
            factor: factor.clone(),
            projected,
            chol,
            mean_z: DVector::zeros(rank),
        };
        let targets: Vec<DVector<f64>> = observations.iter().map(|o| o.y.clone()).collect();
        let qs: Vec<&DMatrix<f64>> = observations.iter().map(|o| &o.q).collect();
        post.mean_z = post.mean_for(&qs, &targets);
        Ok(post)
    }

    /// Posterior mean of `z` for the same design but different targets.
    pub fn mean_for(&self, qs: &[&DMatrix<f64>], targets: &[DVector<f64>]) -> DVector<f64> {
        let mut rhs = DVector::zeros(self.factor.ncols());
        for ((qft, w), (q, y)) in self.projected.iter().zip(qs.iter().zip(targets)) {
            let resid = y - *q * &self.prior_mean;
            rhs += qft * resid * *w;
        }
        self.chol.solve(&rhs)
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn mean_z(&self) -> &DVector<f64> {
        &self.mean_z
    }

    pub fn mean_x(&self) -> DVector<f64> {
        self.to_x(&self.mean_z)
    }

    /// Posterior covariance of `x`, `F P^{-1} F'`.
    pub fn covariance_x(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        &self.factor * inv * self.factor.transpose()
    }

    pub fn to_x(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.prior_mean + &self.factor * z
    }

    pub fn sample_z<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.sample_z_around(rng, &self.mean_z)
    }

    pub fn sample_z_around<R: Rng + ?Sized>(&self, rng: &mut R, mean: &DVector<f64>) -> DVector<f64> {
        sample_with_precision(rng, mean, &self.chol)
    }

    pub fn log_density_z(&self, z: &DVector<f64>) -> f64 {
        log_density_with_precision(z, &self.mean_z, &self.chol)
    }

    pub fn log_density_z_around(&self, z: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        log_density_with_precision(z, mean, &self.chol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_factor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn no_data_returns_prior() {
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        let f = spectral_factor(&sigma).unwrap();
        let zero = LinearObservation::new(DMatrix::zeros(3, 2), DVector::zeros(3), 5.0).unwrap();
        let post = FactorPosterior::new(&mean, &f, &[zero]).unwrap();
        assert!((post.mean_x() - &mean).amax() < 1e-14);
        assert!((post.covariance_x() - sigma).amax() < 1e-12);
    }

    #[test]
    fn conjugate_regression_closed_form() {
        let q = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 0.2, 1.0, -0.3, 0.8, 1.1, 0.0]);
        let y = DVector::from_vec(vec![0.4, 1.2, -0.1, 0.9]);
        let mean = DVector::from_vec(vec![0.3, -0.2]);
        let sigma = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let tau = 4.0;
        let post = FactorPosterior::new(
            &mean,
            &spectral_factor(&sigma).unwrap(),
            &[LinearObservation::new(q.clone(), y.clone(), tau).unwrap()],
        )
        .unwrap();
        let sinv = sigma.clone().try_inverse().unwrap();
        let prec = &sinv + q.transpose() * &q * tau;
        let cov = prec.try_inverse().unwrap();
        let mu = &cov * (&sinv * &mean + q.transpose() * &y * tau);
        assert!((post.mean_x() - mu).amax() < 1e-12);
        assert!((post.covariance_x() - cov).amax() < 1e-12);
    }

    #[test]
    fn flat_prior_approaches_least_squares() {
        let q = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 2.5]);
        let post = FactorPosterior::new(
            &DVector::zeros(2),
            &(DMatrix::identity(2, 2) * 1e6),
            &[LinearObservation::new(q.clone(), y.clone(), 1.0).unwrap()],
        )
        .unwrap();
        let ls = (q.transpose() * &q).try_inverse().unwrap() * q.transpose() * y;
        assert!(((post.mean_x() - &ls).norm() / ls.norm()) < 1e-4);
    }

    #[test]
    fn rank_deficient_prior_stays_in_range() {
        let v = DVector::from_vec(vec![1.0, 1.0]);
        let f = spectral_factor(&(&v * v.transpose())).unwrap();
        let mean = DVector::from_vec(vec![0.5, -0.5]);
        let obs = LinearObservation::new(DMatrix::identity(2, 2), DVector::from_vec(vec![3.0, 0.0]), 10.0).unwrap();
        let post = FactorPosterior::new(&mean, &f, &[obs]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = post.to_x(&post.sample_z(&mut rng));
            assert!(((x[0] - x[1]) - 1.0).abs() < 1e-12);
        }
    }
}
