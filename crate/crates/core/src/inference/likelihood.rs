//! Point and tangent-angle likelihoods.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::curve::{ControlPolygon, Point, RothBasis};
use crate::error::{Error, Result};

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive, got {v}")))
    }
}

/// Sum of squared distances `||p_i - C(t_i)||^2`.
pub fn sum_squared_residuals(c: &ControlPolygon, points: &[Point], t: &[f64]) -> Result<f64> {
    if points.len() != t.len() {
        return Err(Error::shape(points.len(), t.len()));
    }
    Ok(points
        .iter()
        .zip(t)
        .map(|(p, &ti)| {
            let q = c.eval(ti);
            (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
        })
        .sum())
}

/// `sum_i log N2(p_i; C(t_i), tau_p^{-1} I)`.
pub fn loglik_points(c: &ControlPolygon, points: &[Point], t: &[f64], tau_p: f64) -> Result<f64> {
    check_positive("tau_p", tau_p)?;
    let sse = sum_squared_residuals(c, points, t)?;
    Ok(points_loglik_from_sse(sse, points.len(), tau_p))
}

pub(crate) fn points_loglik_from_sse(sse: f64, n: usize, tau_p: f64) -> f64 {
    n as f64 * (tau_p / (2.0 * PI)).ln() - 0.5 * tau_p * sse
}

/// Squared misalignment `(Hx sin(theta) - Hy cos(theta))^2` between a
/// velocity and an observed tangent angle.
pub fn orientation_residual_sq(h: Point, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    (h[0] * s - h[1] * c).powi(2)
}

/// Log of the tangent-angle likelihood with the unknown velocity magnitude
/// integrated out:
/// `log |cos theta| - log(2 pi tau2)/2 - (Hx sin theta - Hy cos theta)^2 / (2 tau2)`.
pub fn orientation_log_marginal(h: Point, theta: f64, tau2: f64) -> f64 {
    theta.cos().abs().ln() - 0.5 * (2.0 * PI * tau2).ln() - orientation_residual_sq(h, theta) / (2.0 * tau2)
}

/// Sum of [`orientation_log_marginal`] over every point.
pub fn loglik_orientations(c: &ControlPolygon, theta: &[f64], t: &[f64], tau2: f64) -> Result<f64> {
    check_positive("tau2", tau2)?;
    if theta.len() != t.len() {
        return Err(Error::shape(t.len(), theta.len()));
    }
    Ok(theta
        .iter()
        .zip(t)
        .map(|(&th, &ti)| orientation_log_marginal(c.hodograph(ti), th, tau2))
        .sum())
}

/// `sum_i (w_i' c)^2` with the misalignment rows of [`orientation_rows`].
pub fn orientation_quadratic(c: &ControlPolygon, theta: &[f64], t: &[f64]) -> Result<f64> {
    if theta.len() != t.len() {
        return Err(Error::shape(t.len(), theta.len()));
    }
    Ok(theta
        .iter()
        .zip(t)
        .map(|(&th, &ti)| orientation_residual_sq(c.hodograph(ti), th))
        .sum())
}

/// `sum_i log |cos theta_i|`, the part of the orientation likelihood that
/// depends on neither the curve nor `tau2`.
pub fn orientation_constant(theta: &[f64]) -> f64 {
    theta.iter().map(|th| th.cos().abs().ln()).sum()
}

/// Stacked design `[X(t_1); ...; X(t_N)]`, `2N x 2J`.
pub fn stacked_design(degree: usize, t: &[f64]) -> Result<DMatrix<f64>> {
    let basis = RothBasis::new(degree)?;
    let j = basis.num_points();
    let mut w = vec![0.0; j];
    let mut m = DMatrix::zeros(2 * t.len(), 2 * j);
    for (i, &ti) in t.iter().enumerate() {
        basis.weights_into(ti, &mut w);
        for (k, &v) in w.iter().enumerate() {
            m[(2 * i, 2 * k)] = v;
            m[(2 * i + 1, 2 * k + 1)] = v;
        }
    }
    Ok(m)
}

/// Rows `w_i = sin(theta_i) Xdot_x(t_i) - cos(theta_i) Xdot_y(t_i)`, so
/// `w_i' c` is the misalignment whose square enters the orientation
/// likelihood. `N x 2J`.
pub fn orientation_rows(degree: usize, theta: &[f64], t: &[f64]) -> Result<DMatrix<f64>> {
    if theta.len() != t.len() {
        return Err(Error::shape(t.len(), theta.len()));
    }
    let basis = RothBasis::new(degree)?;
    let j = basis.num_points();
    let mut w = vec![0.0; j];
    let mut m = DMatrix::zeros(t.len(), 2 * j);
    for (i, (&th, &ti)) in theta.iter().zip(t).enumerate() {
        basis.derivatives_into(ti, &mut w);
        let (s, c) = th.sin_cos();
        for (k, &v) in w.iter().enumerate() {
            m[(i, 2 * k)] = s * v;
            m[(i, 2 * k + 1)] = -c * v;
        }
    }
    Ok(m)
}

/// Stacked points `[p_1x, p_1y, ...]`.
pub fn stacked_points(points: &[Point]) -> DVector<f64> {
    DVector::from_iterator(2 * points.len(), points.iter().flat_map(|p| [p[0], p[1]]))
}
