//! The multiscale random shape process: an initial ellipse inflated from a
//! point, then repeated degree elevation followed by an oriented random
//! deformation.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curve::{num_control_points, ControlPolygon, ElevationMatrix, Point};
use crate::deformation::{orienting_block_exact, orienting_block_with_fallback, OrientingBlock};
use crate::error::{Error, Result};
use crate::linalg::{spectral_factor, standard_normal_vector};

/// How a vanishing tangent at an influence point is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TangentPolicy {
    Strict,
    Fallback,
}

/// `n_r = 2^(r+1) - 1`, i.e. `1, 3, 7, 15, ...`.
pub fn default_degrees(levels: usize) -> Vec<usize> {
    (0..=levels).map(|r| (1usize << (r + 1)) - 1).collect()
}

/// Fixed rotations by 120, 240 and 360 degrees used to inflate the initial
/// point curve.
pub fn initial_block() -> OrientingBlock {
    OrientingBlock::from_angles(&[2.0 * PI / 3.0, 4.0 * PI / 3.0, 2.0 * PI])
}

/// `c0 = m + T0 d0` with `m` broadcast to all three control points.
pub fn initial_polygon(m: Point, d0: &[f64]) -> Result<ControlPolygon> {
    let rotated = initial_block().apply(d0)?;
    let coords = rotated
        .chunks_exact(2)
        .flat_map(|v| [m[0] + v[0], m[1] + v[1]])
        .collect();
    ControlPolygon::new(1, coords)
}

/// Prior parameters of the shape process for levels `r = 0..=R`.
#[derive(Debug, Clone)]
pub struct ShapeProcessSpec {
    degrees: Vec<usize>,
    mu: Vec<DVector<f64>>,
    sigma: Vec<DMatrix<f64>>,
    factors: Vec<DMatrix<f64>>,
    elevations: Vec<ElevationMatrix>,
    mu_m: Point,
    sigma_m: DMatrix<f64>,
    factor_m: DMatrix<f64>,
}

impl ShapeProcessSpec {
    pub fn new(
        degrees: Vec<usize>,
        mu: Vec<DVector<f64>>,
        sigma: Vec<DMatrix<f64>>,
        mu_m: Point,
        sigma_m: DMatrix<f64>,
    ) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::Config("degrees: at least one level is required".into()));
        }
        if degrees[0] != 1 {
            return Err(Error::Config(format!(
                "degrees[0]: the initial curve has degree 1, got {}",
                degrees[0]
            )));
        }
        if let Some(w) = degrees.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "degrees: schedule must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        let levels = degrees.len();
        if mu.len() != levels {
            return Err(Error::Config(format!("mu: expected {levels} levels, got {}", mu.len())));
        }
        if sigma.len() != levels {
            return Err(Error::Config(format!(
                "sigma: expected {levels} levels, got {}",
                sigma.len()
            )));
        }
        let mut factors = Vec::with_capacity(levels);
        for (r, (&n, (m, s))) in degrees.iter().zip(mu.iter().zip(&sigma)).enumerate() {
            let dim = 2 * num_control_points(n);
            if m.len() != dim {
                return Err(Error::Config(format!("mu[{r}]: expected length {dim}, got {}", m.len())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("mu[{r}]: entries must be finite")));
            }
            if s.shape() != (dim, dim) {
                return Err(Error::Config(format!(
                    "sigma[{r}]: expected {dim}x{dim}, got {}x{}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            factors.push(
                spectral_factor(s).map_err(|e| Error::Config(format!("sigma[{r}]: {e}")))?,
            );
        }
        if sigma_m.shape() != (2, 2) {
            return Err(Error::Config("sigma_m: expected a 2x2 matrix".into()));
        }
        let factor_m =
            spectral_factor(&sigma_m).map_err(|e| Error::Config(format!("sigma_m: {e}")))?;
        let elevations = degrees
            .windows(2)
            .map(|w| ElevationMatrix::between(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(ShapeProcessSpec {
            degrees,
            mu,
            sigma,
            factors,
            elevations,
            mu_m,
            sigma_m,
            factor_m,
        })
    }

    /// Number of refinement steps `R`.
    pub fn levels(&self) -> usize {
        self.degrees.len() - 1
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn degree(&self, r: usize) -> usize {
        self.degrees[r]
    }

    pub fn dim(&self, r: usize) -> usize {
        2 * num_control_points(self.degrees[r])
    }

    pub fn mu(&self, r: usize) -> &DVector<f64> {
        &self.mu[r]
    }

    pub fn sigma(&self, r: usize) -> &DMatrix<f64> {
        &self.sigma[r]
    }

    /// Spectral factor `F_r` with `F_r F_r' = Sigma_r`.
    pub fn factor(&self, r: usize) -> &DMatrix<f64> {
        &self.factors[r]
    }

    /// Elevation `E_r` from level `r - 1` to level `r` (`r >= 1`).
    pub fn elevation(&self, r: usize) -> &ElevationMatrix {
        &self.elevations[r - 1]
    }

    pub fn mu_m(&self) -> Point {
        self.mu_m
    }

    pub fn sigma_m(&self) -> &DMatrix<f64> {
        &self.sigma_m
    }

    pub fn factor_m(&self) -> &DMatrix<f64> {
        &self.factor_m
    }

    pub fn with_mu(&self, mu: Vec<DVector<f64>>) -> Result<Self> {
        ShapeProcessSpec::new(
            self.degrees.clone(),
            mu,
            self.sigma.clone(),
            self.mu_m,
            self.sigma_m.clone(),
        )
    }

    pub fn with_sigma(&self, r: usize, sigma: DMatrix<f64>) -> Result<Self> {
        let mut all = self.sigma.clone();
        all[r] = sigma;
        ShapeProcessSpec::new(
            self.degrees.clone(),
            self.mu.clone(),
            all,
            self.mu_m,
            self.sigma_m.clone(),
        )
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: SpecFile = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("spec: {e}")))?;
        file.into_spec()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        ShapeProcessSpec::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let dense = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        serde_json::json!({
            "R": self.levels(),
            "degrees": self.degrees,
            "mu": self.mu.iter().map(|m| m.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "sigma": self.sigma.iter().map(dense).collect::<Vec<_>>(),
            "mu_m": self.mu_m,
            "sigma_m": dense(&self.sigma_m),
        })
    }
}

/// Covariance as written in a spec file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    Dense(Vec<Vec<f64>>),
    Diag { diag: DiagSpec },
    Paired { paired: PairedSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DiagSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// Mirror-symmetry constraint: 1-based control-point pairs and the
/// per-coordinate variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedSpec {
    pub pairs: Vec<[usize; 2]>,
    pub variance: f64,
}

impl CovarianceSpec {
    pub fn build(&self, degree: usize, field: &str) -> Result<DMatrix<f64>> {
        let dim = 2 * num_control_points(degree);
        match self {
            CovarianceSpec::Dense(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config(format!("{field}: expected a {dim}x{dim} matrix")));
                }
                Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
            }
            CovarianceSpec::Diag { diag: DiagSpec::Scalar(v) } => {
                Ok(DMatrix::identity(dim, dim) * *v)
            }
            CovarianceSpec::Diag { diag: DiagSpec::Vector(v) } => {
                if v.len() != dim {
                    return Err(Error::Config(format!(
                        "{field}: diagonal needs {dim} entries, got {}",
                        v.len()
                    )));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(v)))
            }
            CovarianceSpec::Paired { paired } => {
                let pairs: Vec<(usize, usize)> =
                    paired.pairs.iter().map(|p| (p[0], p[1])).collect();
                reflection_symmetry_cov(degree, &pairs, paired.variance)
                    .map_err(|e| Error::Config(format!("{field}: {e}")))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecFile {
    #[serde(rename = "R")]
    pub levels: usize,
    #[serde(default)]
    pub degrees: Option<Vec<usize>>,
    #[serde(default)]
    pub mu: Option<Vec<Option<Vec<f64>>>>,
    pub sigma: Vec<CovarianceSpec>,
    #[serde(default)]
    pub mu_m: Option<Point>,
    #[serde(default)]
    pub sigma_m: Option<CovarianceSpec>,
}

impl SpecFile {
    pub fn into_spec(self) -> Result<ShapeProcessSpec> {
        let degrees = self.degrees.unwrap_or_else(|| default_degrees(self.levels));
        if degrees.len() != self.levels + 1 {
            return Err(Error::Config(format!(
                "degrees: R = {} needs {} entries, got {}",
                self.levels,
                self.levels + 1,
                degrees.len()
            )));
        }
        let mu_in = self.mu.unwrap_or_default();
        if mu_in.len() > degrees.len() {
            return Err(Error::Config(format!(
                "mu: at most {} levels, got {}",
                degrees.len(),
                mu_in.len()
            )));
        }
        let mu = degrees
            .iter()
            .enumerate()
            .map(|(r, &n)| {
                let dim = 2 * num_control_points(n);
                match mu_in.get(r).cloned().flatten() {
                    Some(v) => Ok(DVector::from_vec(v)),
                    // unit circle for the initial curve, no mean deformation after
                    None if r == 0 => Ok(DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0])),
                    None => Ok(DVector::zeros(dim)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if self.sigma.len() != degrees.len() {
            return Err(Error::Config(format!(
                "sigma: expected {} levels, got {}",
                degrees.len(),
                self.sigma.len()
            )));
        }
        let sigma = self
            .sigma
            .iter()
            .zip(&degrees)
            .enumerate()
            .map(|(r, (s, &n))| s.build(n, &format!("sigma[{r}]")))
            .collect::<Result<Vec<_>>>()?;
        let sigma_m = match &self.sigma_m {
            None => DMatrix::zeros(2, 2),
            Some(CovarianceSpec::Dense(rows)) => {
                if rows.len() != 2 || rows.iter().any(|r| r.len() != 2) {
                    return Err(Error::Config("sigma_m: expected a 2x2 matrix".into()));
                }
                DMatrix::from_fn(2, 2, |i, j| rows[i][j])
            }
            Some(CovarianceSpec::Diag { diag: DiagSpec::Scalar(v) }) => DMatrix::identity(2, 2) * *v,
            Some(CovarianceSpec::Diag { diag: DiagSpec::Vector(v) }) if v.len() == 2 => {
                DMatrix::from_diagonal(&DVector::from_column_slice(v))
            }
            Some(_) => return Err(Error::Config("sigma_m: expected a 2x2 or diagonal covariance".into())),
        };
        ShapeProcessSpec::new(degrees, mu, sigma, self.mu_m.unwrap_or([0.0, 0.0]), sigma_m)
    }
}

/// Covariance whose draws are mirror-symmetric under the reflection that
/// swaps each listed pair of control points (1-based indices).
///
/// A mirror image keeps the normal displacement and reverses the tangential
/// one, so within a pair the y-components are perfectly correlated and the
/// x-components perfectly anti-correlated. Points left unpaired by a
/// non-empty pairing sit on the mirror axis and get no tangential freedom.
/// An empty pairing gives `base_variance * I`.
pub fn reflection_symmetry_cov(
    degree: usize,
    pairs: &[(usize, usize)],
    base_variance: f64,
) -> Result<DMatrix<f64>> {
    let j = num_control_points(degree);
    let dim = 2 * j;
    if !(base_variance >= 0.0) || !base_variance.is_finite() {
        return Err(Error::Config(format!("base variance must be non-negative, got {base_variance}")));
    }
    if pairs.is_empty() {
        return Ok(DMatrix::identity(dim, dim) * base_variance);
    }
    let mut used = vec![false; j];
    for &(a, b) in pairs {
        for idx in [a, b] {
            if idx < 1 || idx > j {
                return Err(Error::Config(format!("pair index {idx} outside 1..={j}")));
            }
            if used[idx - 1] {
                return Err(Error::Config(format!("control point {idx} appears in more than one pair")));
            }
            used[idx - 1] = true;
        }
        if a == b {
            return Err(Error::Config(format!("control point {a} paired with itself")));
        }
    }
    let mut columns: Vec<DVector<f64>> = Vec::new();
    for &(a, b) in pairs {
        let (a, b) = (a - 1, b - 1);
        let mut normal = DVector::zeros(dim);
        normal[2 * a + 1] = 1.0;
        normal[2 * b + 1] = 1.0;
        let mut tangential = DVector::zeros(dim);
        tangential[2 * a] = 1.0;
        tangential[2 * b] = -1.0;
        columns.push(normal);
        columns.push(tangential);
    }
    for (idx, _) in used.iter().enumerate().filter(|(_, &u)| !u) {
        let mut normal = DVector::zeros(dim);
        normal[2 * idx + 1] = 1.0;
        columns.push(normal);
    }
    let f = DMatrix::from_columns(&columns);
    Ok(&f * f.transpose() * base_variance)
}

/// The pairing of a reflection that fixes control point `axis` (1-based)
/// of a degree-`n` polygon: `j` and `j'` pair when
/// `(j - 1) + (j' - 1) = 2 (axis - 1) mod J`.
pub fn reflection_pairs(n: usize, axis: usize) -> Result<Vec<(usize, usize)>> {
    let j = num_control_points(n);
    if axis < 1 || axis > j {
        return Err(Error::Index { index: axis, max: j });
    }
    let s = 2 * (axis - 1) % j;
    let mut pairs = Vec::new();
    for a in 0..j {
        let b = (s + j - a) % j;
        if a < b {
            pairs.push((a + 1, b + 1));
        }
    }
    Ok(pairs)
}

/// One refinement step: `E_r c_prev + T_r(E_r c_prev) d`.
pub fn process_step(
    c_prev: &ControlPolygon,
    r: usize,
    spec: &ShapeProcessSpec,
    d: &[f64],
) -> Result<ControlPolygon> {
    process_step_with(c_prev, r, spec, d, TangentPolicy::Strict)
}

pub fn process_step_with(
    c_prev: &ControlPolygon,
    r: usize,
    spec: &ShapeProcessSpec,
    d: &[f64],
    policy: TangentPolicy,
) -> Result<ControlPolygon> {
    if r == 0 || r > spec.levels() {
        return Err(Error::Domain(format!("refinement level {r} outside 1..={}", spec.levels())));
    }
    if c_prev.degree() != spec.degree(r - 1) {
        return Err(Error::shape(
            num_control_points(spec.degree(r - 1)),
            c_prev.num_points(),
        ));
    }
    if d.len() != spec.dim(r) {
        return Err(Error::shape(spec.dim(r), d.len()));
    }
    let elevated = spec.elevation(r).apply(c_prev)?;
    let block = match policy {
        TangentPolicy::Strict => orienting_block_exact(&elevated)?,
        TangentPolicy::Fallback => orienting_block_with_fallback(&elevated),
    };
    let shift = block.apply(d)?;
    let coords = elevated.coords().iter().zip(&shift).map(|(a, b)| a + b).collect();
    ControlPolygon::new(elevated.degree(), coords)
}

/// Center, per-level deformations, and the polygon at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrajectory {
    pub m: Point,
    pub deformations: Vec<Vec<f64>>,
    pub polygons: Vec<ControlPolygon>,
}

impl ShapeTrajectory {
    pub fn final_polygon(&self) -> &ControlPolygon {
        self.polygons.last().expect("trajectory has at least the initial level")
    }
}

/// Folds `(m, d^(0..R))` through the process.
pub fn build_trajectory(
    spec: &ShapeProcessSpec,
    m: Point,
    deformations: Vec<Vec<f64>>,
    policy: TangentPolicy,
) -> Result<ShapeTrajectory> {
    if deformations.len() != spec.levels() + 1 {
        return Err(Error::shape(spec.levels() + 1, deformations.len()));
    }
    let mut polygons = Vec::with_capacity(deformations.len());
    polygons.push(initial_polygon(m, &deformations[0])?);
    for r in 1..=spec.levels() {
        let next = process_step_with(&polygons[r - 1], r, spec, &deformations[r], policy)?;
        polygons.push(next);
    }
    Ok(ShapeTrajectory {
        m,
        deformations,
        polygons,
    })
}

pub fn sample_shape_with<R: Rng + ?Sized>(spec: &ShapeProcessSpec, rng: &mut R) -> Result<ShapeTrajectory> {
    let zm = standard_normal_vector(rng, spec.factor_m().ncols());
    let mv = spec.factor_m() * zm;
    let m = [spec.mu_m()[0] + mv[0], spec.mu_m()[1] + mv[1]];
    let deformations = (0..=spec.levels())
        .map(|r| {
            let z = standard_normal_vector(rng, spec.factor(r).ncols());
            let d = spec.mu(r) + spec.factor(r) * z;
            d.iter().copied().collect()
        })
        .collect();
    build_trajectory(spec, m, deformations, TangentPolicy::Strict)
}

/// Draw a trajectory from the prior with a seeded ChaCha8 stream.
pub fn sample_shape(spec: &ShapeProcessSpec, seed: u64) -> Result<ShapeTrajectory> {
    sample_shape_with(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `count` independent draws. Draw `k` uses stream `k` of the ChaCha8
/// generator seeded with `seed`, so a prefix does not change as `count`
/// grows.
pub fn sample_population(spec: &ShapeProcessSpec, count: usize, seed: u64) -> Result<Vec<ShapeTrajectory>> {
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            sample_shape_with(spec, &mut rng)
        })
        .collect()
}

/// The trajectory with every deformation at its mean and `m = mu_m`.
pub fn central_trajectory(spec: &ShapeProcessSpec) -> Result<ShapeTrajectory> {
    let deformations = (0..=spec.levels())
        .map(|r| spec.mu(r).iter().copied().collect())
        .collect();
    build_trajectory(spec, spec.mu_m(), deformations, TangentPolicy::Strict)
}

pub fn central_shape(spec: &ShapeProcessSpec) -> Result<ControlPolygon> {
    Ok(central_trajectory(spec)?.final_polygon().clone())
}
