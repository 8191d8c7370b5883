//! Posterior sampling for the shape process fitted to point clouds.
//!
//! A sweep per shape refreshes the approximate orienting factors, redraws
//! the curve parameters on a grid, then updates the center and every
//! deformation level. Deformation draws come from a conjugate normal built
//! on the linearized process and are corrected by Metropolis-Hastings
//! against the exact process. Noise levels and, for populations, the mean
//! deformations are updated once all shapes have moved.

mod chain;
mod gaussian;
mod init;
mod likelihood;
mod sampler;
mod scalar;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curve::{ControlPolygon, Point};
use crate::error::{Error, Result};
use crate::image_ingest::OrientedPointCloud;
use crate::linalg::spectral_factor;
use crate::process::{CovarianceSpec, ShapeProcessSpec, SpecFile};

pub use chain::{run_chain, run_chain_from, ChainOutput, ChainRecord, ChainSummary, ShapeRecord, ShapeSummary};
pub use gaussian::{FactorPosterior, LinearObservation};
pub use init::{cloud_scale, data_scaled_spec, ellipse_fit, initial_state, DefaultScales, EllipseFit};
pub use likelihood::{
    loglik_orientations, loglik_points, orientation_constant, orientation_log_marginal,
    orientation_quadratic, orientation_residual_sq, orientation_rows, stacked_design,
    stacked_points, sum_squared_residuals,
};
pub use sampler::{
    cond_update_d_r, cond_update_m, deformation_proposal, deformations_of, exact_tail, log_target, mh_correct, phase_move, resplit_move,
    DeformationProposal, MhOutcome, ShapeContext, ShapeDesign, SweepCache,
};
pub use scalar::{
    griddy_log_weights, griddy_probabilities, griddy_update_t, mu_posterior, tau2_posterior,
    tau_p_posterior, update_mu_r, update_tau_p, update_tau_theta, GridCurve, GriddyGrid,
};

/// One observed point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeObservations {
    points: Vec<Point>,
    theta: Option<Vec<f64>>,
}

impl ShapeObservations {
    pub fn new(points: Vec<Point>, theta: Option<Vec<f64>>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("point coordinates must be finite".into()));
        }
        if let Some(th) = &theta {
            if th.len() != points.len() {
                return Err(Error::shape(points.len(), th.len()));
            }
            if th.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("tangent angles must be finite".into()));
            }
        }
        Ok(ShapeObservations { points, theta })
    }

    pub fn from_cloud(cloud: &OrientedPointCloud) -> Result<Self> {
        ShapeObservations::new(cloud.points().to_vec(), cloud.theta().map(|t| t.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn theta(&self) -> Option<&[f64]> {
        self.theta.as_deref()
    }

    pub fn without_orientations(&self) -> Self {
        ShapeObservations {
            points: self.points.clone(),
            theta: None,
        }
    }
}

/// Point clouds fitted jointly, one per shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    shapes: Vec<ShapeObservations>,
}

impl ObservationSet {
    pub fn new(shapes: Vec<ShapeObservations>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::Config("at least one point cloud is required".into()));
        }
        for (k, s) in shapes.iter().enumerate() {
            if s.len() < 3 {
                return Err(Error::Config(format!(
                    "cloud {k}: at least 3 points are required, got {}",
                    s.len()
                )));
            }
        }
        Ok(ObservationSet { shapes })
    }

    pub fn single(shape: ShapeObservations) -> Result<Self> {
        ObservationSet::new(vec![shape])
    }

    pub fn shapes(&self) -> &[ShapeObservations] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn total_points(&self) -> usize {
        self.shapes.iter().map(|s| s.len()).sum()
    }

    pub fn total_orientations(&self) -> usize {
        self.shapes.iter().filter_map(|s| s.theta()).map(|t| t.len()).sum()
    }

    pub fn has_orientations(&self) -> bool {
        self.shapes.iter().any(|s| s.theta().is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for GammaPrior {
    fn default() -> Self {
        GammaPrior {
            shape: 1e-3,
            rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGammaPrior {
    pub shape: f64,
    pub scale: f64,
}

impl Default for InverseGammaPrior {
    fn default() -> Self {
        InverseGammaPrior {
            shape: 1e-3,
            scale: 1e-3,
        }
    }
}

/// Normal hyperprior on one level's mean deformation.
#[derive(Debug, Clone)]
pub struct MuHyperprior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl MuHyperprior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::Config(format!(
                "hyperprior covariance must be {0}x{0}, got {1}x{2}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        spectral_factor(&cov)?;
        Ok(MuHyperprior { mean, cov })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Everything the posterior needs besides data: the shape process, the
/// noise priors, and (for populations) hyperpriors on the mean
/// deformations.
#[derive(Debug, Clone)]
pub struct PriorConfig {
    pub process: ShapeProcessSpec,
    pub tau_p: GammaPrior,
    pub tau2: InverseGammaPrior,
    /// One entry per level; `None` keeps every `mu_r` fixed.
    pub mu_hyper: Option<Vec<MuHyperprior>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MuHyperFile {
    #[serde(default)]
    mean: Option<Vec<f64>>,
    cov: CovarianceSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PriorFile {
    #[serde(flatten)]
    process: SpecFile,
    #[serde(default)]
    tau_p_prior: Option<GammaPrior>,
    #[serde(default)]
    tau2_prior: Option<InverseGammaPrior>,
    #[serde(default)]
    mu_hyper: Option<Vec<MuHyperFile>>,
}

impl PriorConfig {
    pub fn new(process: ShapeProcessSpec) -> Self {
        PriorConfig {
            process,
            tau_p: GammaPrior::default(),
            tau2: InverseGammaPrior::default(),
            mu_hyper: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}: must be positive, got {v}")))
            }
        };
        positive("tau_p_prior.shape", self.tau_p.shape)?;
        positive("tau_p_prior.rate", self.tau_p.rate)?;
        positive("tau2_prior.shape", self.tau2.shape)?;
        positive("tau2_prior.scale", self.tau2.scale)?;
        if let Some(h) = &self.mu_hyper {
            if h.len() != self.process.levels() + 1 {
                return Err(Error::Config(format!(
                    "mu_hyper: expected {} levels, got {}",
                    self.process.levels() + 1,
                    h.len()
                )));
            }
            for (r, hr) in h.iter().enumerate() {
                if hr.mean.len() != self.process.dim(r) {
                    return Err(Error::Config(format!(
                        "mu_hyper[{r}]: expected length {}, got {}",
                        self.process.dim(r),
                        hr.mean.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hyperpriors centred on the process means with covariance `var * I`.
    pub fn with_isotropic_hyperprior(mut self, var: f64) -> Result<Self> {
        let h = (0..=self.process.levels())
            .map(|r| {
                let dim = self.process.dim(r);
                MuHyperprior::new(self.process.mu(r).clone(), DMatrix::identity(dim, dim) * var)
            })
            .collect::<Result<Vec<_>>>()?;
        self.mu_hyper = Some(h);
        Ok(self)
    }

    /// Hyperpriors centred on the process means with covariance
    /// `factor * Sigma_r`, so each `mu_r` varies on the scale of the
    /// deformations it summarizes.
    pub fn with_proportional_hyperprior(mut self, factor: f64) -> Result<Self> {
        let h = (0..=self.process.levels())
            .map(|r| MuHyperprior::new(self.process.mu(r).clone(), self.process.sigma(r) * factor))
            .collect::<Result<Vec<_>>>()?;
        self.mu_hyper = Some(h);
        Ok(self)
    }

    /// Parses a spec file, which may carry the optional keys
    /// `tau_p_prior {shape, rate}`, `tau2_prior {shape, scale}` and
    /// `mu_hyper` (per level `{mean?, cov}`) besides the process itself.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: PriorFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("spec: {e}")))?;
        let process = file.process.into_spec()?;
        let mu_hyper = match file.mu_hyper {
            None => None,
            Some(levels) => {
                if levels.len() != process.levels() + 1 {
                    return Err(Error::Config(format!(
                        "mu_hyper: expected {} levels, got {}",
                        process.levels() + 1,
                        levels.len()
                    )));
                }
                let built = levels
                    .into_iter()
                    .enumerate()
                    .map(|(r, h)| {
                        let field = format!("mu_hyper[{r}]");
                        let cov = h.cov.build(process.degree(r), &field)?;
                        let mean = match h.mean {
                            Some(v) => DVector::from_vec(v),
                            None => process.mu(r).clone(),
                        };
                        MuHyperprior::new(mean, cov).map_err(|e| Error::Config(format!("{field}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(built)
            }
        };
        let prior = PriorConfig {
            process,
            tau_p: file.tau_p_prior.unwrap_or_default(),
            tau2: file.tau2_prior.unwrap_or_default(),
            mu_hyper,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        PriorConfig::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Summation grid for the parameter updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GriddySpec {
    pub size: usize,
    /// Weight grid cells by the tangent-angle likelihood when angles are
    /// observed.
    pub orientation: bool,
}

impl GriddySpec {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("grid size must be at least 2, got {size}")));
        }
        Ok(GriddySpec {
            size,
            orientation: true,
        })
    }
}

impl Default for GriddySpec {
    fn default() -> Self {
        GriddySpec {
            size: 256,
            orientation: true,
        }
    }
}

/// How the deformation proposal is centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MhProposal {
    /// Linearization through the current exact curve; the proposal depends
    /// on the current state and the reverse density enters the ratio.
    Anchored,
    /// Fixed linearization through the approximate factors alone.
    Independent,
}

/// Default spread of the reparameterization move.
pub const DEFAULT_PHASE_STEP: f64 = 0.2;

/// Default step of the between-level move, in prior scales.
pub const DEFAULT_RESPLIT_STEP: f64 = 0.5;

/// Between-level moves tried per adjacent pair of levels, shape and sweep.
/// They never evaluate the likelihood, so several are cheap.
pub const RESPLIT_TRIES: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub griddy: GriddySpec,
    pub proposal: MhProposal,
    /// Worker threads for the per-shape updates; `None` uses the global
    /// pool.
    pub threads: Option<usize>,
    /// Standard deviation (radians) of the reparameterization move tried
    /// once per shape and sweep; `None` leaves it out of the sweep.
    pub phase_step: Option<f64>,
    /// Step of the move that trades detail between adjacent levels at a
    /// fixed curve; `None` leaves it out of the sweep.
    pub resplit_step: Option<f64>,
}

impl McmcConfig {
    pub fn new(iterations: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        McmcConfig {
            iterations,
            burn_in,
            thin,
            seed,
            griddy: GriddySpec::default(),
            proposal: MhProposal::Anchored,
            threads: None,
            phase_step: Some(DEFAULT_PHASE_STEP),
            resplit_step: Some(DEFAULT_RESPLIT_STEP),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.burn_in > self.iterations {
            return Err(Error::Config(format!(
                "burn-in ({}) exceeds iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.griddy.size < 2 {
            return Err(Error::Config("grid size must be at least 2".into()));
        }
        for (name, step) in [("phase_step", self.phase_step), ("resplit_step", self.resplit_step)] {
            if let Some(s) = step {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive, got {s}")));
                }
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Latent state of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeState {
    pub m: Point,
    pub d: Vec<DVector<f64>>,
    /// Exact polygons `c^(0..R)` implied by `m` and `d`.
    pub polygons: Vec<ControlPolygon>,
    /// Curve parameter of every observed point.
    pub t: Vec<f64>,
}

impl ShapeState {
    pub fn final_polygon(&self) -> &ControlPolygon {
        self.polygons.last().expect("state has at least the initial level")
    }
}

/// Full sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub shapes: Vec<ShapeState>,
    pub tau_p: f64,
    pub tau2: f64,
    /// Current mean deformation of every level.
    pub mu: Vec<DVector<f64>>,
}
