//! Noise-level, curve-parameter and population-mean updates.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::curve::{wrap_parameter, ControlPolygon, Point, RothBasis};
use crate::error::{Error, Result};
use crate::linalg::{spectral_factor, standard_normal_vector, EIGEN_FLOOR};

use super::likelihood::orientation_residual_sq;
use super::{GammaPrior, InverseGammaPrior, MuHyperprior};

/// `(shape, rate)` of the Gamma conditional of the point precision given
/// the total squared residual over `n_tot` points.
pub fn tau_p_posterior(prior: &GammaPrior, sse: f64, n_tot: usize) -> (f64, f64) {
    (prior.shape + n_tot as f64, prior.rate + 0.5 * sse)
}

pub fn update_tau_p<R: Rng + ?Sized>(rng: &mut R, prior: &GammaPrior, sse: f64, n_tot: usize) -> Result<f64> {
    let (shape, rate) = tau_p_posterior(prior, sse, n_tot);
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(format!("tau_p conditional: {e}")))?;
    Ok(g.sample(rng))
}

/// `(shape, scale)` of the inverse-Gamma conditional of the orientation
/// noise variance, given the summed squared misalignment of `n` angles.
pub fn tau2_posterior(prior: &InverseGammaPrior, quad: f64, n: usize) -> (f64, f64) {
    (prior.shape + 0.5 * n as f64, prior.scale + 0.5 * quad)
}

pub fn update_tau_theta<R: Rng + ?Sized>(
    rng: &mut R,
    prior: &InverseGammaPrior,
    quad: f64,
    n: usize,
) -> Result<f64> {
    let (shape, scale) = tau2_posterior(prior, quad, n);
    let g = Gamma::new(shape, 1.0 / scale).map_err(|e| Error::Numerical(format!("tau2 conditional: {e}")))?;
    let precision: f64 = g.sample(rng);
    Ok(1.0 / precision.max(f64::MIN_POSITIVE))
}

/// Uniform grid of `size` points on `[-pi, pi)` with basis values cached
/// for one degree.
#[derive(Debug, Clone)]
pub struct GriddyGrid {
    values: Vec<f64>,
    degree: usize,
    weights: Vec<Vec<f64>>,
    derivatives: Vec<Vec<f64>>,
}

impl GriddyGrid {
    pub fn new(degree: usize, size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("grid size must be at least 2, got {size}")));
        }
        let basis = RothBasis::new(degree)?;
        let values: Vec<f64> = (0..size).map(|g| -PI + 2.0 * PI * g as f64 / size as f64).collect();
        let weights = values.iter().map(|&t| basis.weights(t)).collect();
        let derivatives = values.iter().map(|&t| basis.derivatives(t)).collect();
        Ok(GriddyGrid {
            values,
            degree,
            weights,
            derivatives,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn cell_width(&self) -> f64 {
        2.0 * PI / self.values.len() as f64
    }

    /// Curve points, velocities and log speeds of `c` at every grid value.
    pub fn curve(&self, c: &ControlPolygon) -> Result<GridCurve> {
        if c.degree() != self.degree {
            return Err(Error::shape(2 * (2 * self.degree + 1), c.coords().len()));
        }
        let combine = |w: &[f64]| {
            w.iter()
                .zip(c.coords().chunks_exact(2))
                .fold([0.0, 0.0], |acc, (v, p)| [acc[0] + v * p[0], acc[1] + v * p[1]])
        };
        let points = self.weights.iter().map(|w| combine(w)).collect();
        let velocity: Vec<Point> = self.derivatives.iter().map(|w| combine(w)).collect();
        let log_speed = velocity.iter().map(|h| h[0].hypot(h[1]).ln()).collect();
        Ok(GridCurve {
            points,
            velocity,
            log_speed,
        })
    }
}

/// A curve tabulated on a [`GriddyGrid`].
#[derive(Debug, Clone)]
pub struct GridCurve {
    pub points: Vec<Point>,
    pub velocity: Vec<Point>,
    pub log_speed: Vec<f64>,
}

/// Unnormalized log conditional of one parameter at every grid value:
/// the point likelihood, the speed factor from a prior uniform in arc
/// length, and optionally the tangent-angle likelihood.
pub fn griddy_log_weights(curve: &GridCurve, p: Point, theta: Option<f64>, tau_p: f64, tau2: f64) -> Vec<f64> {
    curve
        .points
        .iter()
        .zip(&curve.velocity)
        .zip(&curve.log_speed)
        .map(|((q, h), ls)| {
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            let mut lw = -0.5 * tau_p * d2 + ls;
            if let Some(th) = theta {
                lw -= orientation_residual_sq(*h, th) / (2.0 * tau2);
            }
            lw
        })
        .collect()
}

/// Normalized cell probabilities. If nothing survives the exponent shift
/// the grid is treated as uniform.
pub fn griddy_probabilities(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let uniform = || vec![1.0 / log_weights.len() as f64; log_weights.len()];
    if !max.is_finite() {
        warn!("all grid weights vanish; drawing the parameter uniformly");
        return uniform();
    }
    let w: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        warn!("grid weights do not normalize; drawing the parameter uniformly");
        return uniform();
    }
    w.into_iter().map(|v| v / total).collect()
}

/// Categorical draw over the grid, then a uniform jitter within the cell
/// centred on the chosen value.
pub fn griddy_update_t<R: Rng + ?Sized>(
    grid: &GriddyGrid,
    curve: &GridCurve,
    p: Point,
    theta: Option<f64>,
    tau_p: f64,
    tau2: f64,
    rng: &mut R,
) -> f64 {
    let probs = griddy_probabilities(&griddy_log_weights(curve, p, theta, tau_p, tau2));
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = probs.len() - 1;
    for (g, pr) in probs.iter().enumerate() {
        acc += pr;
        if u < acc {
            pick = g;
            break;
        }
    }
    let jitter = (rng.random::<f64>() - 0.5) * grid.cell_width();
    wrap_parameter(grid.values()[pick] + jitter)
}

/// Conditional of one level's mean deformation given every shape's
/// deformation at that level, as `(mean, covariance)`.
///
/// Directions outside the range of the level covariance are shared exactly
/// by every shape and by the mean, so only the range component is
/// uncertain; the hyperprior is conditioned on the shared component.
pub fn mu_posterior(
    hyper: &MuHyperprior,
    sigma: &DMatrix<f64>,
    ds: &[DVector<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = hyper.mean().len();
    if ds.is_empty() {
        return Ok((hyper.mean().clone(), hyper.cov().clone()));
    }
    if sigma.shape() != (n, n) {
        return Err(Error::shape(n, sigma.nrows()));
    }
    if let Some(d) = ds.iter().find(|d| d.len() != n) {
        return Err(Error::shape(n, d.len()));
    }
    let k = ds.len() as f64;
    let dbar = ds.iter().fold(DVector::zeros(n), |acc, d| acc + d) / k;
    let eig = sigma.clone().symmetric_eigen();
    let keep = |i: usize| eig.eigenvalues[i] >= EIGEN_FLOOR * (1.0 - 1e-9);
    let range: Vec<usize> = (0..n).filter(|&i| keep(i)).collect();
    let null: Vec<usize> = (0..n).filter(|&i| !keep(i)).collect();
    let u = DMatrix::from_fn(n, range.len(), |i, j| eig.eigenvectors[(i, range[j])]);
    let v = DMatrix::from_fn(n, null.len(), |i, j| eig.eigenvectors[(i, null[j])]);
    let lambda = DVector::from_iterator(range.len(), range.iter().map(|&i| eig.eigenvalues[i]));

    let s0 = hyper.cov();
    let m0 = hyper.mean();
    let (mut prior_mean, mut prior_cov) = (u.tr_mul(m0), u.tr_mul(s0) * &u);
    let fixed = v.tr_mul(&dbar);
    if !null.is_empty() {
        let s_vv = v.tr_mul(s0) * &v;
        let s_wv = u.tr_mul(s0) * &v;
        let pinv = s_vv
            .clone()
            .pseudo_inverse(1e-12 * s_vv.amax().max(1e-300))
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let gain = &s_wv * pinv;
        prior_mean += &gain * (&fixed - v.tr_mul(m0));
        prior_cov -= &gain * s_wv.transpose();
    }
    // stable normal-normal update that tolerates a singular hyperprior
    let obs_cov = DMatrix::from_diagonal(&lambda) / k;
    let innovation = &prior_cov + &obs_cov;
    let inv = innovation
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("mean-deformation innovation is not positive definite".into()))?;
    let gain_t = inv.solve(&prior_cov);
    let post_mean_w = &prior_mean + gain_t.transpose() * (u.tr_mul(&dbar) - &prior_mean);
    let mut post_cov_w = &prior_cov - &prior_cov * &gain_t;
    post_cov_w = (&post_cov_w + post_cov_w.transpose()) * 0.5;
    let mean = &u * post_mean_w + &v * fixed;
    let cov = &u * post_cov_w * u.transpose();
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

pub fn update_mu_r<R: Rng + ?Sized>(
    rng: &mut R,
    hyper: &MuHyperprior,
    sigma: &DMatrix<f64>,
    ds: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let (mean, cov) = mu_posterior(hyper, sigma, ds)?;
    let f = spectral_factor(&cov)?;
    Ok(mean + &f * standard_normal_vector(rng, f.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::likelihood::{loglik_orientations, loglik_points};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Continuous, Gamma as GammaDist, InverseGamma};

    fn triangle() -> ControlPolygon {
        ControlPolygon::from_points(&[[1.0, 0.2], [-0.6, 0.9], [-0.4, -1.1]]).unwrap()
    }

    #[test]
    fn tau_p_rate_arithmetic() {
        let prior = GammaPrior { shape: 2.0, rate: 0.5 };
        assert_eq!(tau_p_posterior(&prior, 0.0, 7), (9.0, 0.5));
        assert_eq!(tau_p_posterior(&prior, 2.0, 1), (3.0, 1.5));
    }

    #[test]
    fn tau_p_kernel_matches_likelihood_times_prior() {
        let c = triangle();
        let t = [0.1, 1.0, -2.5, 2.0];
        let pts = [[0.3, 0.1], [-0.5, 0.5], [0.0, -0.9], [0.2, 0.6]];
        let prior = GammaPrior { shape: 1.5, rate: 0.7 };
        let sse = super::super::likelihood::sum_squared_residuals(&c, &pts, &t).unwrap();
        let (a, b) = tau_p_posterior(&prior, sse, pts.len());
        let post = GammaDist::new(a, b).unwrap();
        let pr = GammaDist::new(prior.shape, prior.rate).unwrap();
        let diffs: Vec<f64> = (1..200)
            .map(|i| {
                let tau = 0.05 * i as f64;
                loglik_points(&c, &pts, &t, tau).unwrap() + pr.ln_pdf(tau) - post.ln_pdf(tau)
            })
            .collect();
        let spread = diffs.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
            - diffs.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        assert!(spread < 1e-10, "spread {spread}");
    }

    #[test]
    fn tau2_kernel_matches_likelihood_times_prior() {
        let c = triangle();
        let t = [0.1, 1.0, -2.5];
        let th = [0.4, -1.2, 1.5];
        let prior = InverseGammaPrior { shape: 2.0, scale: 0.3 };
        let quad = super::super::likelihood::orientation_quadratic(&c, &th, &t).unwrap();
        let (a, b) = tau2_posterior(&prior, quad, th.len());
        let post = InverseGamma::new(a, b).unwrap();
        let pr = InverseGamma::new(prior.shape, prior.scale).unwrap();
        let diffs: Vec<f64> = (1..200)
            .map(|i| {
                let tau2 = 0.02 * i as f64;
                loglik_orientations(&c, &th, &t, tau2).unwrap() + pr.ln_pdf(tau2) - post.ln_pdf(tau2)
            })
            .collect();
        let spread = diffs.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
            - diffs.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        assert!(spread < 1e-10, "spread {spread}");
        assert_eq!(tau2_posterior(&prior, 0.0, 4).1, prior.scale);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(update_tau_theta(&mut rng, &prior, quad, 3).unwrap() > 0.0);
        }
    }

    #[test]
    fn griddy_probabilities_normalize() {
        assert_eq!(griddy_probabilities(&[-3.0, -3.0]), vec![0.5, 0.5]);
        let p = griddy_probabilities(&[-1e6, 0.0, -2.0, 5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let u = griddy_probabilities(&[f64::NEG_INFINITY; 4]);
        assert_eq!(u, vec![0.25; 4]);
    }

    #[test]
    fn grid_refinement_agrees() {
        // fine-grid mass gathered into the coarse cells that contain it
        let c = triangle();
        let p = [0.2, 0.7];
        let probs = |size: usize| {
            let grid = GriddyGrid::new(1, size).unwrap();
            griddy_probabilities(&griddy_log_weights(&grid.curve(&c).unwrap(), p, Some(0.5), 20.0, 0.5))
        };
        let (coarse, fine) = (probs(256), probs(4096));
        let ratio = 4096 / 256;
        let mut gathered = vec![0.0; 256];
        for (f, pr) in fine.iter().enumerate() {
            // coarse cell g spans fine indices (ratio*g - ratio/2, ratio*g + ratio/2)
            let shifted = f + ratio / 2;
            if shifted % ratio == 0 {
                gathered[(shifted / ratio) % 256] += 0.5 * pr;
                gathered[(shifted / ratio - 1) % 256] += 0.5 * pr;
            } else {
                gathered[(shifted / ratio) % 256] += pr;
            }
        }
        let tv: f64 = coarse.iter().zip(&gathered).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn griddy_draws_stay_in_range() {
        let c = triangle();
        let grid = GriddyGrid::new(1, 64).unwrap();
        let curve = grid.curve(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = griddy_update_t(&grid, &curve, [0.0, 1.0], None, 5.0, 1.0, &mut rng);
            assert!((-PI..PI).contains(&t));
        }
    }

    #[test]
    fn mu_posterior_limits() {
        let n = 4;
        let sigma = DMatrix::identity(n, n) * 0.5;
        let ds = vec![DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5])];
        let flat = MuHyperprior::new(DVector::zeros(n), DMatrix::identity(n, n) * 1e12).unwrap();
        let (m, _) = mu_posterior(&flat, &sigma, &ds).unwrap();
        assert!((m - &ds[0]).amax() < 1e-4);
        let pinned = MuHyperprior::new(DVector::from_element(n, 3.0), DMatrix::zeros(n, n)).unwrap();
        let (m, cov) = mu_posterior(&pinned, &sigma, &ds).unwrap();
        assert!((m - DVector::from_element(n, 3.0)).amax() < 1e-12);
        assert!(cov.amax() < 1e-12);
    }

    #[test]
    fn mu_posterior_normal_normal() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let hyper = MuHyperprior::new(DVector::from_vec(vec![0.2, -0.1]), DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0])).unwrap();
        let ds = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.5, 0.4]),
            DVector::from_vec(vec![0.8, -0.3]),
        ];
        let (m, cov) = mu_posterior(&hyper, &sigma, &ds).unwrap();
        let s0i = hyper.cov().clone().try_inverse().unwrap();
        let si = sigma.clone().try_inverse().unwrap();
        let prec = &s0i + &si * 3.0;
        let c = prec.try_inverse().unwrap();
        let sum = ds.iter().fold(DVector::zeros(2), |a, d| a + d);
        let mean = &c * (&s0i * hyper.mean() + &si * sum);
        assert!((m - &mean).amax() < 1e-12);
        assert!((cov - c).amax() < 1e-12);
        // shape order does not matter
        let rev: Vec<_> = ds.iter().rev().cloned().collect();
        let (m2, _) = mu_posterior(&hyper, &sigma, &rev).unwrap();
        assert!((m2 - mean).amax() < 1e-12);
    }

    #[test]
    fn mu_posterior_keeps_shared_null_component() {
        let v = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let sigma = &v * v.transpose();
        let ds = vec![DVector::from_vec(vec![1.0, 2.0, 3.0]), DVector::from_vec(vec![-1.0, 2.0, 3.0])];
        let hyper = MuHyperprior::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let mu = update_mu_r(&mut rng, &hyper, &sigma, &ds).unwrap();
            assert!((mu[1] - 2.0).abs() < 1e-12 && (mu[2] - 3.0).abs() < 1e-12);
        }
    }
}
