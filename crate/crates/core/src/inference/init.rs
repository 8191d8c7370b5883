//! Starting values: an ellipse matched to the second moments of each cloud.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::curve::{ControlPolygon, Point};
use crate::error::{Error, Result};
use crate::linalg::factor_coordinates;
use crate::process::{build_trajectory, initial_block, ShapeProcessSpec, ShapeTrajectory, TangentPolicy};

use super::likelihood::{orientation_quadratic, sum_squared_residuals};
use super::{ModelState, ObservationSet, PriorConfig, ShapeObservations, ShapeState};

/// Clockwise ellipse `m + A cos t + B sin t` with the cloud's centroid and
/// principal axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    pub center: Point,
    pub a: Point,
    pub b: Point,
}

impl EllipseFit {
    pub fn eval(&self, t: f64) -> Point {
        let (s, c) = t.sin_cos();
        [
            self.center[0] + self.a[0] * c + self.b[0] * s,
            self.center[1] + self.a[1] * c + self.b[1] * s,
        ]
    }

    /// The degree-1 polygon tracing this ellipse.
    pub fn polygon(&self) -> ControlPolygon {
        let pts: Vec<Point> = (0..3)
            .map(|j| {
                let (s, c) = (2.0 * PI * j as f64 / 3.0).sin_cos();
                [
                    self.center[0] + 2.0 * (self.a[0] * c - self.b[0] * s),
                    self.center[1] + 2.0 * (self.a[1] * c - self.b[1] * s),
                ]
            })
            .collect();
        ControlPolygon::from_points(&pts).expect("three finite points")
    }

    /// Parameter of the ellipse point in the direction of `p`.
    pub fn parameter(&self, p: Point) -> f64 {
        let a2 = self.a[0].powi(2) + self.a[1].powi(2);
        let b2 = self.b[0].powi(2) + self.b[1].powi(2);
        let v = [p[0] - self.center[0], p[1] - self.center[1]];
        let x = (v[0] * self.a[0] + v[1] * self.a[1]) / a2;
        let y = (v[0] * self.b[0] + v[1] * self.b[1]) / b2;
        y.atan2(x)
    }
}

/// Ellipse with semi-axes `sqrt(2)` times the principal standard
/// deviations (exact for points spread uniformly in parameter). The major
/// axis points toward the heavier third-moment tail so the fit rotates
/// with the cloud.
pub fn ellipse_fit(points: &[Point]) -> Result<EllipseFit> {
    if points.len() < 3 {
        return Err(Error::Domain(format!("need at least 3 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let center = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (x, y) = (p[0] - center[0], p[1] - center[1]);
        sxx += x * x / n;
        sxy += x * y / n;
        syy += y * y / n;
    }
    let half_tr = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    let (l1, l2) = (half_tr + disc, (half_tr - disc).max(0.0));
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut u1 = [angle.cos(), angle.sin()];
    let skew: f64 = points
        .iter()
        .map(|p| ((p[0] - center[0]) * u1[0] + (p[1] - center[1]) * u1[1]).powi(3))
        .sum();
    if skew < 0.0 {
        u1 = [-u1[0], -u1[1]];
    }
    let u2 = [-u1[1], u1[0]];
    let a = (2.0 * l1).sqrt();
    if !(a > 0.0) {
        return Err(Error::Domain("points are all identical".into()));
    }
    let b = (2.0 * l2).sqrt().max(1e-3 * a);
    Ok(EllipseFit {
        center,
        a: [a * u1[0], a * u1[1]],
        b: [-b * u2[0], -b * u2[1]],
    })
}

fn project(mean: &DVector<f64>, factor: &nalgebra::DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    mean + factor * factor_coordinates(factor, &(v - mean))
}

/// State for one cloud: the center and level-0 deformation reproduce the
/// fitted ellipse as closely as the prior support allows, finer levels sit
/// at their means.
pub fn initial_shape(spec: &ShapeProcessSpec, mu: &[DVector<f64>], obs: &ShapeObservations) -> Result<ShapeState> {
    let fit = ellipse_fit(obs.points())?;
    let m = if spec.factor_m().ncols() == 0 {
        spec.mu_m()
    } else {
        let mu_m = DVector::from_vec(spec.mu_m().to_vec());
        let v = project(&mu_m, spec.factor_m(), &DVector::from_vec(fit.center.to_vec()));
        [v[0], v[1]]
    };
    let tri = fit.polygon();
    let rel: Vec<f64> = tri.points().flat_map(|p| [p[0] - m[0], p[1] - m[1]]).collect();
    let d0 = DVector::from_vec(initial_block().apply_transpose(&rel)?);
    let d0 = project(&mu[0], spec.factor(0), &d0);
    let mut ds: Vec<Vec<f64>> = vec![d0.iter().copied().collect()];
    ds.extend((1..=spec.levels()).map(|r| mu[r].iter().copied().collect::<Vec<_>>()));
    let traj = build_trajectory(spec, m, ds, TangentPolicy::Fallback)?;
    let t = obs.points().iter().map(|&p| fit.parameter(p)).collect();
    Ok(state_from_trajectory(&traj, t))
}

pub(crate) fn state_from_trajectory(traj: &ShapeTrajectory, t: Vec<f64>) -> ShapeState {
    ShapeState {
        m: traj.m,
        d: traj.deformations.iter().map(|d| DVector::from_column_slice(d)).collect(),
        polygons: traj.polygons.clone(),
        t,
    }
}

/// Starting state for the whole set; noise levels are set from the
/// starting residuals.
pub fn initial_state(prior: &PriorConfig, obs: &ObservationSet) -> Result<ModelState> {
    let spec = &prior.process;
    let mu: Vec<DVector<f64>> = match &prior.mu_hyper {
        Some(h) => h.iter().map(|hr| hr.mean().clone()).collect(),
        None => (0..=spec.levels()).map(|r| spec.mu(r).clone()).collect(),
    };
    let shapes = obs
        .shapes()
        .iter()
        .map(|o| initial_shape(spec, &mu, o))
        .collect::<Result<Vec<_>>>()?;
    let mut sse = 0.0;
    let mut quad = 0.0;
    for (s, o) in shapes.iter().zip(obs.shapes()) {
        sse += sum_squared_residuals(s.final_polygon(), o.points(), &s.t)?;
        if let Some(th) = o.theta() {
            quad += orientation_quadratic(s.final_polygon(), th, &s.t)?;
        }
    }
    let clamp = |v: f64| if v.is_finite() { v.clamp(1e-12, 1e12) } else { 1.0 };
    let tau_p = clamp(2.0 * obs.total_points() as f64 / sse);
    let n_theta = obs.total_orientations();
    let tau2 = if n_theta > 0 { clamp(quad / n_theta as f64) } else { 1.0 };
    Ok(ModelState {
        shapes,
        tau_p,
        tau2,
        mu,
    })
}

/// Scales for [`data_scaled_spec`], as multiples of the cloud's RMS radius.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultScales {
    /// Standard deviation of the center and of `d^(0)`.
    pub coarse: f64,
    /// Standard deviation of `d^(r)` for `r >= 1`, one entry per level;
    /// the last entry repeats for deeper levels.
    pub refinement: Vec<f64>,
}

impl Default for DefaultScales {
    fn default() -> Self {
        DefaultScales {
            coarse: 1.0,
            refinement: vec![0.3, 0.1],
        }
    }
}

/// Centroid and RMS distance from it.
pub fn cloud_scale(points: &[Point]) -> Result<(Point, f64)> {
    if points.is_empty() {
        return Err(Error::Domain("empty point cloud".into()));
    }
    let n = points.len() as f64;
    let c = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let s = (points.iter().map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sum::<f64>() / n).sqrt();
    if !(s > 0.0) {
        return Err(Error::Domain("points are all identical".into()));
    }
    Ok((c, s))
}

/// A weakly informative process for `levels` refinements of the default
/// degree schedule, placed over the cloud: the center prior sits on the
/// centroid, the central shape is a circle of the cloud's RMS radius, and
/// every deformation has isotropic spread proportional to that radius.
pub fn data_scaled_spec(points: &[Point], levels: usize, scales: &DefaultScales) -> Result<ShapeProcessSpec> {
    let (c, s) = cloud_scale(points)?;
    let degrees = crate::process::default_degrees(levels);
    let mut mu = Vec::with_capacity(levels + 1);
    let mut sigma = Vec::with_capacity(levels + 1);
    for (r, &n) in degrees.iter().enumerate() {
        let dim = 2 * (2 * n + 1);
        if r == 0 {
            // control points at twice the radius trace a circle of that radius
            mu.push(DVector::from_fn(dim, |i, _| if i % 2 == 1 { 2.0 * s } else { 0.0 }));
            sigma.push(nalgebra::DMatrix::identity(dim, dim) * (scales.coarse * s).powi(2));
        } else {
            let f = scales
                .refinement
                .get(r - 1)
                .or(scales.refinement.last())
                .copied()
                .unwrap_or(0.1);
            mu.push(DVector::zeros(dim));
            sigma.push(nalgebra::DMatrix::identity(dim, dim) * (f * s).powi(2));
        }
    }
    ShapeProcessSpec::new(degrees, mu, sigma, c, nalgebra::DMatrix::identity(2, 2) * (scales.coarse * s).powi(2))
}
