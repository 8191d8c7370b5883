//! Sweep orchestration, stored records and summaries.

use std::io::Write;

use log::{debug, warn};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::{ControlPolygon, Point};
use crate::error::{Error, Result};
use crate::linalg::factor_coordinates;
use crate::process::{build_trajectory, TangentPolicy};

use super::init::initial_state;
use super::likelihood::{
    orientation_constant, orientation_quadratic, sum_squared_residuals,
};
use super::sampler::{cond_update_d_r, cond_update_m, phase_move, resplit_move, ShapeContext, ShapeDesign, SweepCache};
use super::scalar::{griddy_update_t, update_mu_r, update_tau_p, update_tau_theta, GriddyGrid};
use super::{McmcConfig, ModelState, ObservationSet, PriorConfig, ShapeObservations, ShapeState, RESPLIT_TRIES};

/// One shape in a stored record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub m: Point,
    pub d: Vec<Vec<f64>>,
    /// Final control polygon coordinates.
    pub control: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub iteration: usize,
    pub tau_p: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau2: Option<f64>,
    pub loglik: f64,
    pub log_posterior: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mu: Option<Vec<Vec<f64>>>,
    /// Central-shape polygon coordinates implied by the current means.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub central: Option<Vec<f64>>,
    pub shapes: Vec<ShapeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub degrees: Vec<usize>,
    pub seed: u64,
    pub orientations: bool,
    pub population: bool,
    pub point_counts: Vec<usize>,
    pub records: Vec<ChainRecord>,
    /// Log-likelihood after every iteration, burn-in included.
    pub loglik_trace: Vec<f64>,
    /// Accepted proposals per shape and level.
    pub accepted: Vec<Vec<usize>>,
    /// Attempted proposals per shape and level.
    pub attempted: Vec<Vec<usize>>,
    /// Accepted reparameterization moves per shape (attempted once per
    /// iteration when enabled).
    pub phase_accepted: Vec<usize>,
    pub phase_moves: bool,
    /// Accepted between-level moves per shape, and how many were tried.
    pub resplit_accepted: Vec<usize>,
    pub resplit_tried: Vec<usize>,
    pub final_t: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub points: usize,
    pub m: Point,
    pub d: Vec<Vec<f64>>,
    /// Posterior standard deviation of every deformation coordinate.
    pub d_sd: Vec<Vec<f64>>,
    pub polygon: ControlPolygon,
    pub acceptance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub records: usize,
    pub shapes: usize,
    pub orientations: bool,
    pub tau_p: f64,
    pub tau_p_sd: f64,
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau2: Option<f64>,
    pub acceptance: Vec<f64>,
    /// Acceptance rate of the reparameterization move, when enabled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phase_acceptance: Option<f64>,
    /// Acceptance rate of the between-level move, when enabled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub resplit_acceptance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mu: Option<Vec<Vec<f64>>>,
    pub central_shape: ControlPolygon,
    pub per_shape: Vec<ShapeSummary>,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ChainOutput {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn acceptance_rates(&self) -> Vec<Vec<f64>> {
        self.accepted
            .iter()
            .zip(&self.attempted)
            .map(|(a, n)| {
                a.iter()
                    .zip(n)
                    .map(|(&a, &n)| if n == 0 { 1.0 } else { a as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    /// Mean of the stored polygons after shifting each one's parameter
    /// origin onto a common reference: the curve parameterization is only
    /// identified up to a phase, so plain coordinate averages blur as soon
    /// as the chain moves along it. The reference is the first draw, then
    /// the mean from that first pass.
    fn mean_polygon(&self, coords: impl Fn(&ChainRecord) -> Vec<f64>) -> Result<ControlPolygon> {
        let top = *self.degrees.last().expect("at least one level");
        if self.records.is_empty() {
            return Err(Error::Config("chain stored no records".into()));
        }
        let polys = self
            .records
            .iter()
            .map(|r| ControlPolygon::new(top, coords(r)))
            .collect::<Result<Vec<_>>>()?;
        let mut reference = polys[0].clone();
        for _ in 0..2 {
            let mut acc = vec![0.0; reference.coords().len()];
            for p in &polys {
                let (_, aligned) = p.phase_aligned_to(&reference)?;
                for (a, v) in acc.iter_mut().zip(aligned.coords()) {
                    *a += v;
                }
            }
            let n = polys.len() as f64;
            reference = ControlPolygon::new(top, acc.into_iter().map(|v| v / n).collect())?;
        }
        Ok(reference)
    }

    /// Posterior-mean final polygon of shape `k`.
    pub fn posterior_mean_polygon(&self, k: usize) -> Result<ControlPolygon> {
        self.mean_polygon(|r| r.shapes[k].control.clone())
    }

    /// Posterior mean of the central shape in population mode, otherwise
    /// the posterior-mean curve of the first shape.
    pub fn central_shape(&self) -> Result<ControlPolygon> {
        if self.population {
            self.mean_polygon(|r| r.central.clone().unwrap_or_default())
        } else {
            self.posterior_mean_polygon(0)
        }
    }

    /// Draws of coordinate `i` of `d^(r)` for shape `k`.
    pub fn deformation_trace(&self, k: usize, r: usize, i: usize) -> Vec<f64> {
        self.records.iter().map(|rec| rec.shapes[k].d[r][i]).collect()
    }

    pub fn summary(&self) -> Result<ChainSummary> {
        if self.records.is_empty() {
            return Err(Error::Config("chain stored no records; lower burn-in or thin".into()));
        }
        let rates = self.acceptance_rates();
        let (tau_p, tau_p_sd) = mean_sd(self.records.iter().map(|r| r.tau_p));
        let tau2 = self
            .orientations
            .then(|| mean_sd(self.records.iter().filter_map(|r| r.tau2)).0);
        let levels = self.degrees.len();
        let overall = (0..levels)
            .map(|l| {
                let a: usize = self.accepted.iter().map(|v| v[l]).sum();
                let n: usize = self.attempted.iter().map(|v| v[l]).sum();
                if n == 0 { 1.0 } else { a as f64 / n as f64 }
            })
            .collect();
        let mu = self.population.then(|| {
            (0..levels)
                .map(|l| {
                    let dim = self.records[0].mu.as_ref().map(|m| m[l].len()).unwrap_or(0);
                    (0..dim)
                        .map(|i| mean_sd(self.records.iter().map(|r| r.mu.as_ref().unwrap()[l][i])).0)
                        .collect()
                })
                .collect()
        });
        let per_shape = (0..self.point_counts.len())
            .map(|k| {
                let m = [
                    mean_sd(self.records.iter().map(|r| r.shapes[k].m[0])).0,
                    mean_sd(self.records.iter().map(|r| r.shapes[k].m[1])).0,
                ];
                let dims: Vec<usize> = self.records[0].shapes[k].d.iter().map(|d| d.len()).collect();
                let stats: Vec<Vec<(f64, f64)>> = dims
                    .iter()
                    .enumerate()
                    .map(|(l, &dim)| {
                        (0..dim)
                            .map(|i| mean_sd(self.records.iter().map(|r| r.shapes[k].d[l][i])))
                            .collect()
                    })
                    .collect();
                Ok(ShapeSummary {
                    points: self.point_counts[k],
                    m,
                    d: stats.iter().map(|v| v.iter().map(|s| s.0).collect()).collect(),
                    d_sd: stats.iter().map(|v| v.iter().map(|s| s.1).collect()).collect(),
                    polygon: self.posterior_mean_polygon(k)?,
                    acceptance: rates[k].clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ChainSummary {
            records: self.records.len(),
            shapes: self.point_counts.len(),
            orientations: self.orientations,
            tau_p,
            tau_p_sd,
            sigma: (1.0 / tau_p).sqrt(),
            tau2,
            acceptance: overall,
            phase_acceptance: self.phase_moves.then(|| {
                let tries = (self.loglik_trace.len() * self.phase_accepted.len()).max(1);
                self.phase_accepted.iter().sum::<usize>() as f64 / tries as f64
            }),
            resplit_acceptance: (self.resplit_tried.iter().sum::<usize>() > 0).then(|| {
                self.resplit_accepted.iter().sum::<usize>() as f64 / self.resplit_tried.iter().sum::<usize>() as f64
            }),
            mu,
            central_shape: self.central_shape()?,
            per_shape,
        })
    }
}

/// Root stream for the shared updates; shape `k` uses stream `k + 1`.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct SweepStats {
    accepted: Vec<bool>,
    phase: bool,
    resplit: (usize, usize),
}

fn sweep_shape(
    ctx: &ShapeContext,
    grid: &GriddyGrid,
    config: &McmcConfig,
    state: &mut ShapeState,
    rng: &mut ChaCha8Rng,
) -> Result<SweepStats> {
    let cache = SweepCache::build(ctx.spec, state)?;
    let curve = grid.curve(state.final_polygon())?;
    let theta = ctx.obs.theta().filter(|_| config.griddy.orientation);
    for (i, p) in ctx.obs.points().iter().enumerate() {
        state.t[i] = griddy_update_t(grid, &curve, *p, theta.map(|th| th[i]), ctx.tau_p, ctx.tau2, rng);
    }
    let design = ShapeDesign::new(ctx.spec, ctx.obs, &state.t)?;
    cond_update_m(ctx, state, &cache, &design, rng)?;
    let accepted = (0..=ctx.spec.levels())
        .map(|r| cond_update_d_r(ctx, state, &design, r, rng).map(|o| o.accepted))
        .collect::<Result<Vec<_>>>()?;
    let phase = match config.phase_step {
        Some(scale) => phase_move(ctx, state, scale, rng)?.accepted,
        None => false,
    };
    let mut resplit = (0, 0);
    if let Some(step) = config.resplit_step {
        for r in 0..ctx.spec.levels() {
            for _ in 0..RESPLIT_TRIES {
                resplit.0 += resplit_move(ctx, state, r, step, rng)?.accepted as usize;
                resplit.1 += 1;
            }
        }
    }
    Ok(SweepStats { accepted, phase, resplit })
}

/// Sweep with one retry from the saved state on numerical failure.
fn sweep_with_retry(
    ctx: &ShapeContext,
    grid: &GriddyGrid,
    config: &McmcConfig,
    state: &mut ShapeState,
    rng: &mut ChaCha8Rng,
) -> Result<SweepStats> {
    let saved = state.clone();
    match sweep_shape(ctx, grid, config, state, rng) {
        Ok(s) => Ok(s),
        Err(e @ (Error::Numerical(_) | Error::DegenerateTangent { .. })) => {
            warn!("sweep failed ({e}); retrying once");
            *state = saved;
            sweep_shape(ctx, grid, config, state, rng)
        }
        Err(e) => Err(e),
    }
}

fn log_joint(prior: &PriorConfig, obs: &ObservationSet, state: &ModelState) -> Result<(f64, f64)> {
    let spec = &prior.process;
    let mut loglik = 0.0;
    let mut logprior = 0.0;
    for (s, o) in state.shapes.iter().zip(obs.shapes()) {
        let c = s.final_polygon();
        let sse = sum_squared_residuals(c, o.points(), &s.t)?;
        loglik += super::likelihood::points_loglik_from_sse(sse, o.len(), state.tau_p);
        if let Some(th) = o.theta() {
            let q = orientation_quadratic(c, th, &s.t)?;
            loglik += orientation_constant(th)
                - 0.5 * th.len() as f64 * (2.0 * std::f64::consts::PI * state.tau2).ln()
                - q / (2.0 * state.tau2);
        }
        for (r, d) in s.d.iter().enumerate() {
            let z = factor_coordinates(spec.factor(r), &(d - &state.mu[r]));
            logprior -= 0.5 * z.norm_squared();
        }
        let mu_m = DVector::from_vec(spec.mu_m().to_vec());
        let zm = factor_coordinates(spec.factor_m(), &(DVector::from_vec(s.m.to_vec()) - mu_m));
        logprior -= 0.5 * zm.norm_squared();
    }
    logprior += (prior.tau_p.shape - 1.0) * state.tau_p.ln() - prior.tau_p.rate * state.tau_p;
    if obs.has_orientations() {
        logprior += -(prior.tau2.shape + 1.0) * state.tau2.ln() - prior.tau2.scale / state.tau2;
    }
    Ok((loglik, loglik + logprior))
}

fn central_coords(prior: &PriorConfig, mu: &[DVector<f64>]) -> Result<Vec<f64>> {
    let ds = mu.iter().map(|m| m.iter().copied().collect()).collect();
    let traj = build_trajectory(&prior.process, prior.process.mu_m(), ds, TangentPolicy::Fallback)?;
    Ok(traj.final_polygon().coords().to_vec())
}

/// Runs the sampler from the default starting state.
pub fn run_chain(obs: &ObservationSet, prior: &PriorConfig, config: &McmcConfig) -> Result<ChainOutput> {
    prior.validate()?;
    let state = initial_state(prior, obs)?;
    run_chain_from(obs, prior, config, state)
}

pub fn run_chain_from(
    obs: &ObservationSet,
    prior: &PriorConfig,
    config: &McmcConfig,
    state: ModelState,
) -> Result<ChainOutput> {
    config.validate()?;
    prior.validate()?;
    if state.shapes.len() != obs.len() {
        return Err(Error::shape(obs.len(), state.shapes.len()));
    }
    match config.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| chain_loop(obs, prior, config, state))
        }
        None => chain_loop(obs, prior, config, state),
    }
}

fn chain_loop(
    obs: &ObservationSet,
    prior: &PriorConfig,
    config: &McmcConfig,
    mut state: ModelState,
) -> Result<ChainOutput> {
    let spec = &prior.process;
    let levels = spec.levels();
    let population = prior.mu_hyper.is_some();
    let grid = GriddyGrid::new(spec.degree(levels), config.griddy.size)?;
    let mut hyper_rng = stream(config.seed, 0);
    let mut shape_rngs: Vec<ChaCha8Rng> = (0..obs.len()).map(|k| stream(config.seed, k as u64 + 1)).collect();
    let k_shapes = obs.len();
    let mut accepted = vec![vec![0usize; levels + 1]; k_shapes];
    let mut attempted = vec![vec![0usize; levels + 1]; k_shapes];
    let mut phase_accepted = vec![0usize; k_shapes];
    let mut resplit_accepted = vec![0usize; k_shapes];
    let mut resplit_tried = vec![0usize; k_shapes];
    let mut records = Vec::new();
    let mut loglik_trace = Vec::with_capacity(config.iterations);
    let n_tot = obs.total_points();
    let n_theta = obs.total_orientations();

    for iter in 1..=config.iterations {
        let (tau_p, tau2) = (state.tau_p, state.tau2);
        let mu = state.mu.clone();
        let results: Vec<Result<SweepStats>> = state
            .shapes
            .par_iter_mut()
            .zip(shape_rngs.par_iter_mut())
            .zip(obs.shapes().par_iter())
            .map(|((s, rng), o): ((&mut ShapeState, &mut ChaCha8Rng), &ShapeObservations)| {
                let ctx = ShapeContext {
                    spec,
                    mu: &mu,
                    obs: o,
                    tau_p,
                    tau2,
                    proposal: config.proposal,
                };
                sweep_with_retry(&ctx, &grid, config, s, rng)
            })
            .collect();
        for (k, res) in results.into_iter().enumerate() {
            let stats = res?;
            phase_accepted[k] += stats.phase as usize;
            resplit_accepted[k] += stats.resplit.0;
            resplit_tried[k] += stats.resplit.1;
            for (r, a) in stats.accepted.into_iter().enumerate() {
                if spec.factor(r).ncols() > 0 {
                    attempted[k][r] += 1;
                    accepted[k][r] += a as usize;
                }
            }
        }

        let mut sse = 0.0;
        let mut quad = 0.0;
        for (s, o) in state.shapes.iter().zip(obs.shapes()) {
            sse += sum_squared_residuals(s.final_polygon(), o.points(), &s.t)?;
            if let Some(th) = o.theta() {
                quad += orientation_quadratic(s.final_polygon(), th, &s.t)?;
            }
        }
        state.tau_p = update_tau_p(&mut hyper_rng, &prior.tau_p, sse, n_tot)?;
        if n_theta > 0 {
            state.tau2 = update_tau_theta(&mut hyper_rng, &prior.tau2, quad, n_theta)?;
        }
        if let Some(hyper) = &prior.mu_hyper {
            for r in 0..=levels {
                if spec.factor(r).ncols() == 0 {
                    continue;
                }
                let ds: Vec<DVector<f64>> = state.shapes.iter().map(|s| s.d[r].clone()).collect();
                state.mu[r] = update_mu_r(&mut hyper_rng, &hyper[r], spec.sigma(r), &ds)?;
            }
        }

        let (loglik, log_post) = log_joint(prior, obs, &state)?;
        if !log_post.is_finite() {
            warn!("non-finite log posterior at iteration {iter}");
        }
        loglik_trace.push(loglik);
        if iter > config.burn_in && (iter - config.burn_in) % config.thin == 0 {
            records.push(ChainRecord {
                iteration: iter,
                tau_p: state.tau_p,
                tau2: (n_theta > 0).then_some(state.tau2),
                loglik,
                log_posterior: log_post,
                mu: population.then(|| state.mu.iter().map(|m| m.iter().copied().collect()).collect()),
                central: if population { Some(central_coords(prior, &state.mu)?) } else { None },
                shapes: state
                    .shapes
                    .iter()
                    .map(|s| ShapeRecord {
                        m: s.m,
                        d: s.d.iter().map(|d| d.iter().copied().collect()).collect(),
                        control: s.final_polygon().coords().to_vec(),
                    })
                    .collect(),
            });
        }
        if iter % 100 == 0 {
            debug!("iteration {iter}: loglik {loglik:.3}, tau_p {:.4e}", state.tau_p);
        }
    }

    Ok(ChainOutput {
        degrees: spec.degrees().to_vec(),
        seed: config.seed,
        orientations: n_theta > 0,
        population,
        point_counts: obs.shapes().iter().map(|s| s.len()).collect(),
        records,
        loglik_trace,
        accepted,
        attempted,
        phase_accepted,
        phase_moves: config.phase_step.is_some(),
        resplit_accepted,
        resplit_tried,
        final_t: state.shapes.iter().map(|s| s.t.clone()).collect(),
    })
}
