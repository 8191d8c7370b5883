//! Cyclic (Roth) basis, closed curves, hodographs, degree elevation and
//! arc-length maps.
//!
//! Index convention: the public API numbers control points `j = 1..=J`,
//! `J = 2n + 1`. Storage is 0-based and stacked, so point `j` occupies
//! `coords[2(j-1)]` (x) and `coords[2(j-1) + 1]` (y). Internal helpers that
//! take a `j0` argument use the 0-based index.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Normalizing constant `h_n = (2^n n!)^2 / (2n+1)!`, accumulated as a
/// running product so it stays finite for large degrees.
pub fn basis_scale(n: usize) -> f64 {
    (1..=n).fold(1.0, |h, k| h * (2 * k) as f64 / (2 * k + 1) as f64)
}

/// `C(2n, k) / C(2n, n)` for `k = 0..=n`.
fn central_binomial_ratios(n: usize) -> Vec<f64> {
    let mut r = vec![0.0; n + 1];
    r[n] = 1.0;
    for k in (1..=n).rev() {
        r[k - 1] = r[k] * k as f64 / (2 * n - k + 1) as f64;
    }
    r
}

/// Number of control points of a degree-`n` curve.
#[inline]
pub fn num_control_points(n: usize) -> usize {
    2 * n + 1
}

/// Parameter value where control point `j0` (0-based) has its largest weight.
#[inline]
pub fn influence_point(n: usize, j0: usize) -> f64 {
    -2.0 * PI * j0 as f64 / num_control_points(n) as f64
}

/// Wraps an angle or curve parameter into `[-pi, pi)`.
pub fn wrap_parameter(t: f64) -> f64 {
    let w = (t + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// A curve parameter in `[-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ParameterValue(f64);

impl ParameterValue {
    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && (-PI..=PI).contains(&t) {
            Ok(ParameterValue(t))
        } else {
            Err(Error::Domain(format!("parameter {t} outside [-pi, pi]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// The degree-`n` cyclic basis with its constants precomputed.
#[derive(Debug, Clone)]
pub struct RothBasis {
    degree: usize,
    scale: f64,
    ratios: Vec<f64>,
}

impl RothBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if degree < 1 {
            return Err(Error::Domain("basis degree must be at least 1".into()));
        }
        Ok(RothBasis {
            degree,
            scale: basis_scale(degree),
            ratios: central_binomial_ratios(degree),
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_points(&self) -> usize {
        num_control_points(self.degree)
    }

    #[inline]
    fn phase(&self, j0: usize) -> f64 {
        2.0 * PI * j0 as f64 / self.num_points() as f64
    }

    /// `B_j(t)` for the 0-based index `j0`.
    #[inline]
    pub fn weight(&self, j0: usize, t: f64) -> f64 {
        let half = 0.5 * (1.0 + (t + self.phase(j0)).cos());
        self.scale * half.powi(self.degree as i32)
    }

    /// `dB_j/dt` for the 0-based index `j0`, from the cosine-series form
    /// `B_j = 1/J + 2/(J C(2n,n)) sum_k C(2n,k) cos((n-k)(t + phase_j))`.
    #[inline]
    pub fn derivative(&self, j0: usize, t: f64) -> f64 {
        let n = self.degree;
        let x = t + self.phase(j0);
        let sum: f64 = (0..n)
            .map(|k| {
                let freq = (n - k) as f64;
                self.ratios[k] * freq * (freq * x).sin()
            })
            .sum();
        -2.0 / self.num_points() as f64 * sum
    }

    pub fn weights_into(&self, t: f64, out: &mut [f64]) {
        for (j0, w) in out.iter_mut().enumerate() {
            *w = self.weight(j0, t);
        }
    }

    pub fn derivatives_into(&self, t: f64, out: &mut [f64]) {
        for (j0, w) in out.iter_mut().enumerate() {
            *w = self.derivative(j0, t);
        }
    }

    pub fn weights(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_points()];
        self.weights_into(t, &mut out);
        out
    }

    pub fn derivatives(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_points()];
        self.derivatives_into(t, &mut out);
        out
    }
}

/// `B_j^n(t)` with the 1-based control-point index `j`.
pub fn basis_weight(n: usize, j: usize, t: f64) -> Result<f64> {
    let basis = RothBasis::new(n)?;
    let max = basis.num_points();
    if j < 1 || j > max {
        return Err(Error::Index { index: j, max });
    }
    Ok(basis.weight(j - 1, t))
}

#[derive(Serialize, Deserialize)]
struct PolygonRepr {
    degree: usize,
    coords: Vec<f64>,
}

/// Control points of a degree-`n` closed curve, stacked as
/// `(c1x, c1y, c2x, c2y, ...)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolygonRepr", into = "PolygonRepr")]
pub struct ControlPolygon {
    degree: usize,
    coords: Vec<f64>,
}

impl TryFrom<PolygonRepr> for ControlPolygon {
    type Error = Error;

    fn try_from(raw: PolygonRepr) -> Result<Self> {
        ControlPolygon::new(raw.degree, raw.coords)
    }
}

impl From<ControlPolygon> for PolygonRepr {
    fn from(c: ControlPolygon) -> Self {
        PolygonRepr {
            degree: c.degree,
            coords: c.coords,
        }
    }
}

impl ControlPolygon {
    pub fn new(degree: usize, coords: Vec<f64>) -> Result<Self> {
        if degree < 1 {
            return Err(Error::Domain("polygon degree must be at least 1".into()));
        }
        let expected = 2 * num_control_points(degree);
        if coords.len() != expected {
            return Err(Error::shape(expected, coords.len()));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("control point coordinates must be finite".into()));
        }
        Ok(ControlPolygon { degree, coords })
    }

    /// Builds a polygon from `2n + 1` points; the degree is inferred.
    pub fn from_points(points: &[Point]) -> Result<Self> {
        if points.len() < 3 || points.len() % 2 == 0 {
            return Err(Error::Domain(format!(
                "a closed curve needs an odd number (>= 3) of control points, got {}",
                points.len()
            )));
        }
        let coords = points.iter().flat_map(|p| p.iter().copied()).collect();
        ControlPolygon::new((points.len() - 1) / 2, coords)
    }

    pub fn from_vector(degree: usize, v: &DVector<f64>) -> Result<Self> {
        ControlPolygon::new(degree, v.iter().copied().collect())
    }

    /// Every control point at `p`; traces the single point `p`.
    pub fn constant(degree: usize, p: Point) -> Result<Self> {
        let j = num_control_points(degree);
        ControlPolygon::new(degree, (0..j).flat_map(|_| p).collect())
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_points(&self) -> usize {
        num_control_points(self.degree)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coords)
    }

    /// Control point `j0` (0-based).
    pub fn point(&self, j0: usize) -> Point {
        [self.coords[2 * j0], self.coords[2 * j0 + 1]]
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.coords.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    pub fn centroid(&self) -> Point {
        let j = self.num_points() as f64;
        let (sx, sy) = self
            .points()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / j, sy / j]
    }

    pub fn translated(&self, by: Point) -> ControlPolygon {
        let coords = self
            .coords
            .chunks_exact(2)
            .flat_map(|c| [c[0] + by[0], c[1] + by[1]])
            .collect();
        ControlPolygon {
            degree: self.degree,
            coords,
        }
    }

    pub fn basis(&self) -> RothBasis {
        RothBasis::new(self.degree).expect("polygon degree validated at construction")
    }

    fn combine(&self, weights: &[f64]) -> Point {
        weights
            .iter()
            .zip(self.coords.chunks_exact(2))
            .fold([0.0, 0.0], |acc, (w, c)| [acc[0] + w * c[0], acc[1] + w * c[1]])
    }

    /// `C(t)`.
    pub fn eval(&self, t: f64) -> Point {
        self.combine(&self.basis().weights(t))
    }

    /// `H(t) = dC/dt`.
    pub fn hodograph(&self, t: f64) -> Point {
        self.combine(&self.basis().derivatives(t))
    }

    /// The same point set traversed from a different start:
    /// `C'(t) = C(t + alpha)`.
    pub fn phase_shifted(&self, alpha: f64) -> ControlPolygon {
        let s = phase_shift_matrix(self.degree, alpha).expect("degree validated at construction");
        let j = self.num_points();
        let mut coords = vec![0.0; 2 * j];
        for r in 0..j {
            for c in 0..j {
                coords[2 * r] += s[(r, c)] * self.coords[2 * c];
                coords[2 * r + 1] += s[(r, c)] * self.coords[2 * c + 1];
            }
        }
        ControlPolygon {
            degree: self.degree,
            coords,
        }
    }

    /// Phase shift `alpha` bringing this polygon closest to `reference` in
    /// the sum of squared control-point distances, with the shifted
    /// polygon. Both must have the same degree.
    pub fn phase_aligned_to(&self, reference: &ControlPolygon) -> Result<(f64, ControlPolygon)> {
        if reference.degree != self.degree {
            return Err(Error::shape(reference.coords.len(), self.coords.len()));
        }
        let j = self.num_points();
        let n = self.degree;
        let step = 2.0 * PI / j as f64;
        // <S_alpha c, ref> = sum_m g_m D_n(step m + alpha) / J
        let mut g = vec![0.0; j];
        for r in 0..j {
            for (m, gm) in g.iter_mut().enumerate() {
                let c = (r + m) % j;
                *gm += reference.coords[2 * r] * self.coords[2 * c] + reference.coords[2 * r + 1] * self.coords[2 * c + 1];
            }
        }
        let (a, b): (Vec<f64>, Vec<f64>) = (1..=n)
            .map(|k| {
                g.iter().enumerate().fold((0.0, 0.0), |(a, b), (m, &gm)| {
                    let (s, c) = (k as f64 * step * m as f64).sin_cos();
                    (a + 2.0 * gm * c / j as f64, b + 2.0 * gm * s / j as f64)
                })
            })
            .unzip();
        // f(alpha) up to a constant, and its first two derivatives
        let f = |x: f64| -> [f64; 3] {
            let mut out = [0.0; 3];
            for k in 1..=n {
                let kf = k as f64;
                let (s, c) = (kf * x).sin_cos();
                let (ak, bk) = (a[k - 1], b[k - 1]);
                out[0] += ak * c - bk * s;
                out[1] += -kf * (ak * s + bk * c);
                out[2] += -kf * kf * (ak * c - bk * s);
            }
            out
        };
        let grid = 16 * j;
        let mut best = (0..grid)
            .map(|i| -PI + 2.0 * PI * i as f64 / grid as f64)
            .max_by(|x, y| f(*x)[0].total_cmp(&f(*y)[0]))
            .unwrap_or(0.0);
        for _ in 0..20 {
            let [_, d1, d2] = f(best);
            if d2 >= 0.0 {
                break;
            }
            let next = best - d1 / d2;
            if (next - best).abs() > PI / grid as f64 || f(next)[0] < f(best)[0] {
                break;
            }
            best = next;
        }
        Ok((best, self.phase_shifted(best)))
    }

    /// `samples` points at `t = -pi + 2 pi k / samples`.
    pub fn sample(&self, samples: usize) -> Vec<(f64, Point)> {
        let basis = self.basis();
        let mut w = vec![0.0; self.num_points()];
        (0..samples)
            .map(|k| {
                let t = -PI + 2.0 * PI * k as f64 / samples as f64;
                basis.weights_into(t, &mut w);
                (t, self.combine(&w))
            })
            .collect()
    }
}

pub fn curve_point(c: &ControlPolygon, t: f64) -> Point {
    c.eval(t)
}

pub fn hodograph_point(c: &ControlPolygon, t: f64) -> Point {
    c.hodograph(t)
}

/// The 2 x 2J matrix `X(t)` with `C(t) = X(t) c`.
pub fn design_matrix(n: usize, t: f64) -> Result<DMatrix<f64>> {
    let w = RothBasis::new(n)?.weights(t);
    Ok(interleave_rows(&w))
}

/// The 2 x 2J matrix `dX/dt` with `H(t) = dX/dt c`. Its first row is the
/// x-row `Xdot_x(t)`, its second the y-row `Xdot_y(t)`.
pub fn hodograph_design_matrix(n: usize, t: f64) -> Result<DMatrix<f64>> {
    let w = RothBasis::new(n)?.derivatives(t);
    Ok(interleave_rows(&w))
}

fn interleave_rows(w: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2, 2 * w.len());
    for (j0, &wj) in w.iter().enumerate() {
        m[(0, 2 * j0)] = wj;
        m[(1, 2 * j0 + 1)] = wj;
    }
    m
}

/// Degree elevation from degree `n` to `n + v`: the scalar matrix acts
/// identically on the x and y coordinates.
#[derive(Debug, Clone)]
pub struct ElevationMatrix {
    from: usize,
    to: usize,
    scalar: DMatrix<f64>,
}

impl ElevationMatrix {
    pub fn new(n: usize, v: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::Domain("elevation source degree must be at least 1".into()));
        }
        let j_src = num_control_points(n);
        if v == 0 {
            return Ok(ElevationMatrix {
                from: n,
                to: n,
                scalar: DMatrix::identity(j_src, j_src),
            });
        }
        let big = n + v;
        let j_dst = num_control_points(big);
        let src = central_binomial_ratios(n);
        let dst = central_binomial_ratios(big);
        // coefficient for frequency n - k: 2/J * [C(2n,k)/C(2n,n)] * [C(2N,N)/C(2N,v+k)]
        let coef: Vec<f64> = (0..n)
            .map(|k| 2.0 / j_src as f64 * src[k] / dst[v + k])
            .collect();
        let scalar = DMatrix::from_fn(j_dst, j_src, |i, j| {
            let psi = 2.0 * PI * i as f64 / j_dst as f64;
            let phi = 2.0 * PI * j as f64 / j_src as f64;
            let series: f64 = (0..n)
                .map(|k| coef[k] * ((n - k) as f64 * (phi - psi)).cos())
                .sum();
            1.0 / j_src as f64 + series
        });
        Ok(ElevationMatrix {
            from: n,
            to: big,
            scalar,
        })
    }

    pub fn between(from: usize, to: usize) -> Result<Self> {
        if to < from {
            return Err(Error::Domain(format!(
                "cannot elevate from degree {from} down to {to}"
            )));
        }
        ElevationMatrix::new(from, to - from)
    }

    pub fn from_degree(&self) -> usize {
        self.from
    }

    pub fn to_degree(&self) -> usize {
        self.to
    }

    /// `(J_to x J_from)` coefficients `E_{i,j}`.
    pub fn scalar(&self) -> &DMatrix<f64> {
        &self.scalar
    }

    /// The stacked `2 J_to x 2 J_from` operator on coordinate vectors.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (rows, cols) = self.scalar.shape();
        let mut m = DMatrix::zeros(2 * rows, 2 * cols);
        for i in 0..rows {
            for j in 0..cols {
                let e = self.scalar[(i, j)];
                m[(2 * i, 2 * j)] = e;
                m[(2 * i + 1, 2 * j + 1)] = e;
            }
        }
        m
    }

    pub fn apply(&self, c: &ControlPolygon) -> Result<ControlPolygon> {
        if c.degree() != self.from {
            return Err(Error::shape(c.num_points(), num_control_points(self.from)));
        }
        let rows = self.scalar.nrows();
        let mut coords = vec![0.0; 2 * rows];
        for i in 0..rows {
            let (mut x, mut y) = (0.0, 0.0);
            for (j, p) in c.points().enumerate() {
                let e = self.scalar[(i, j)];
                x += e * p[0];
                y += e * p[1];
            }
            coords[2 * i] = x;
            coords[2 * i + 1] = y;
        }
        ControlPolygon::new(self.to, coords)
    }
}

pub fn elevation_matrix(n: usize, v: usize) -> Result<ElevationMatrix> {
    ElevationMatrix::new(n, v)
}

pub const DEFAULT_ARC_NODES: usize = 2048;

/// Cumulative arc length `A(u)` tabulated with the composite trapezoid
/// rule on a uniform grid over `[-pi, pi]`.
#[derive(Debug, Clone)]
pub struct ArcLengthMap {
    polygon: ControlPolygon,
    step: f64,
    speeds: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ArcLengthMap {
    pub fn new(polygon: &ControlPolygon, nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::Config(format!(
                "arc-length quadrature needs at least 2 nodes, got {nodes}"
            )));
        }
        let basis = polygon.basis();
        let step = 2.0 * PI / (nodes - 1) as f64;
        let mut deriv = vec![0.0; polygon.num_points()];
        let speeds: Vec<f64> = (0..nodes)
            .map(|k| {
                basis.derivatives_into(-PI + step * k as f64, &mut deriv);
                let h = polygon.combine(&deriv);
                h[0].hypot(h[1])
            })
            .collect();
        let mut cumulative = Vec::with_capacity(nodes);
        cumulative.push(0.0);
        for k in 1..nodes {
            let prev = cumulative[k - 1];
            cumulative.push(prev + 0.5 * step * (speeds[k - 1] + speeds[k]));
        }
        Ok(ArcLengthMap {
            polygon: polygon.clone(),
            step,
            speeds,
            cumulative,
        })
    }

    pub fn polygon(&self) -> &ControlPolygon {
        &self.polygon
    }

    pub fn nodes(&self) -> usize {
        self.speeds.len()
    }

    /// Total length `L = A(pi)`.
    pub fn total(&self) -> f64 {
        *self.cumulative.last().expect("at least two nodes")
    }

    pub fn table(&self) -> &[f64] {
        &self.cumulative
    }

    fn speed(&self, t: f64) -> f64 {
        let h = self.polygon.hodograph(t);
        h[0].hypot(h[1])
    }

    fn eval_unchecked(&self, u: f64) -> f64 {
        if u >= PI {
            return self.total();
        }
        let k = (((u + PI) / self.step).floor() as usize).min(self.nodes() - 2);
        let t_k = -PI + self.step * k as f64;
        let dt = (u - t_k).max(0.0);
        if dt == 0.0 {
            return self.cumulative[k];
        }
        self.cumulative[k] + 0.5 * dt * (self.speeds[k] + self.speed(u))
    }

    /// `A(u)`, the length of the curve traced over `[-pi, u]`.
    pub fn arc_length(&self, u: f64) -> Result<f64> {
        if !u.is_finite() || !(-PI..=PI).contains(&u) {
            return Err(Error::Domain(format!("arc-length parameter {u} outside [-pi, pi]")));
        }
        Ok(self.eval_unchecked(u))
    }

    /// `A^{-1}(l)` by table bracketing and bisection.
    pub fn inverse(&self, l: f64) -> Result<f64> {
        let total = self.total();
        if !l.is_finite() || l < 0.0 || l > total * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "arc length {l} outside [0, {total}]"
            )));
        }
        if l <= 0.0 {
            return Ok(-PI);
        }
        if l >= total {
            return Ok(PI);
        }
        // first node whose cumulative length reaches l
        let hi = self.cumulative.partition_point(|&a| a < l).max(1);
        let (mut lo_t, mut hi_t) = (
            -PI + self.step * (hi - 1) as f64,
            (-PI + self.step * hi as f64).min(PI),
        );
        let tol = 1e-12 * total;
        for _ in 0..200 {
            let mid = 0.5 * (lo_t + hi_t);
            let a = self.eval_unchecked(mid);
            if (a - l).abs() <= tol || hi_t - lo_t < 1e-15 {
                return Ok(mid);
            }
            if a < l {
                lo_t = mid;
            } else {
                hi_t = mid;
            }
        }
        Ok(0.5 * (lo_t + hi_t))
    }
}

pub fn arc_length(map: &ArcLengthMap, u: f64) -> Result<f64> {
    map.arc_length(u)
}

pub fn arc_length_inverse(map: &ArcLengthMap, l: f64) -> Result<f64> {
    map.inverse(l)
}

/// `J x J` matrix `S` such that mapping each coordinate of the control
/// points through `S` turns `C(t)` into `C(t + alpha)`. Entries are the
/// Dirichlet kernel `D_n(x) / J` at the offsets between basis translates,
/// so a shift by `2 pi / J` is a cyclic relabelling of the points.
pub fn phase_shift_matrix(n: usize, alpha: f64) -> Result<DMatrix<f64>> {
    if n < 1 {
        return Err(Error::Domain("degree must be at least 1".into()));
    }
    let j = num_control_points(n);
    let step = 2.0 * PI / j as f64;
    let dirichlet = |x: f64| 1.0 + 2.0 * (1..=n).map(|k| (k as f64 * x).cos()).sum::<f64>();
    Ok(DMatrix::from_fn(j, j, |r, c| {
        dirichlet(step * (c as f64 - r as f64) + alpha) / j as f64
    }))
}

/// Least-squares control polygon of degree `n` through `points` observed at
/// the curve parameters `params`. Directions with singular values below
/// `1e-13` of the largest are dropped, since the high-frequency content of
/// the basis is tiny at large degree.
pub fn fit_control_polygon(n: usize, params: &[f64], points: &[Point]) -> Result<ControlPolygon> {
    if params.len() != points.len() {
        return Err(Error::shape(params.len(), points.len()));
    }
    let basis = RothBasis::new(n)?;
    let j = basis.num_points();
    if points.len() < j {
        return Err(Error::Domain(format!(
            "need at least {j} points to fit a degree-{n} curve, got {}",
            points.len()
        )));
    }
    let mut design = DMatrix::zeros(points.len(), j);
    let mut w = vec![0.0; j];
    for (row, &t) in params.iter().enumerate() {
        basis.weights_into(t, &mut w);
        for (col, &wj) in w.iter().enumerate() {
            design[(row, col)] = wj;
        }
    }
    let rhs = DMatrix::from_fn(points.len(), 2, |r, c| points[r][c]);
    let svd = design.svd(true, true);
    let cutoff = 1e-13 * svd.singular_values.max();
    let sol = svd
        .solve(&rhs, cutoff)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let coords = (0..j).flat_map(|r| [sol[(r, 0)], sol[(r, 1)]]).collect();
    ControlPolygon::new(n, coords)
}
