//! Per-shape conditional updates for the center and the deformations.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::curve::{num_control_points, wrap_parameter, ArcLengthMap, ControlPolygon, Point};
use crate::deformation::{approx_deformation_operator, orienting_block_with_fallback};
use crate::error::{Error, Result};
use crate::linalg::factor_coordinates;
use crate::process::{build_trajectory, initial_block, initial_polygon, process_step_with, ShapeProcessSpec, TangentPolicy};

use super::gaussian::{FactorPosterior, LinearObservation};
use super::likelihood::{orientation_quadratic, orientation_rows, stacked_design, stacked_points, sum_squared_residuals};
use super::{MhProposal, ShapeObservations, ShapeState};

/// Quadrature nodes for the per-sweep curve lengths.
const SWEEP_ARC_NODES: usize = 512;

/// What one shape's updates read but do not change.
#[derive(Debug, Clone, Copy)]
pub struct ShapeContext<'a> {
    pub spec: &'a ShapeProcessSpec,
    /// Current mean deformation per level.
    pub mu: &'a [DVector<f64>],
    pub obs: &'a ShapeObservations,
    pub tau_p: f64,
    pub tau2: f64,
    pub proposal: MhProposal,
}

/// Design matrices at the current parameters.
#[derive(Debug, Clone)]
pub struct ShapeDesign {
    /// `2N x 2J_R` point design.
    pub x: DMatrix<f64>,
    /// `N x 2J_R` tangent misalignment rows, when angles are observed.
    pub w: Option<DMatrix<f64>>,
    pub p: DVector<f64>,
}

impl ShapeDesign {
    pub fn new(spec: &ShapeProcessSpec, obs: &ShapeObservations, t: &[f64]) -> Result<Self> {
        let n = spec.degree(spec.levels());
        let w = match obs.theta() {
            Some(th) => Some(orientation_rows(n, th, t)?),
            None => None,
        };
        Ok(ShapeDesign {
            x: stacked_design(n, t)?,
            w,
            p: stacked_points(obs.points()),
        })
    }
}

/// Approximate factors `E_s + T^_s` for `s = 1..=R` and the suffix products
/// `Omega_{r+1}^R`, evaluated at one state.
#[derive(Debug, Clone)]
pub struct SweepCache {
    lengths: Vec<f64>,
    factors: Vec<DMatrix<f64>>,
    suffix: Vec<DMatrix<f64>>,
}

impl SweepCache {
    /// Lengths `L_A` are measured on the current polygons `c^(0..R-1)`.
    pub fn build(spec: &ShapeProcessSpec, state: &ShapeState) -> Result<Self> {
        let levels = spec.levels();
        let lengths = (0..levels)
            .map(|r| Ok(ArcLengthMap::new(&state.polygons[r], SWEEP_ARC_NODES)?.total()))
            .collect::<Result<Vec<_>>>()?;
        SweepCache::with_lengths(spec, &state.d, lengths)
    }

    pub fn with_lengths(spec: &ShapeProcessSpec, d: &[DVector<f64>], lengths: Vec<f64>) -> Result<Self> {
        let levels = spec.levels();
        if lengths.len() != levels {
            return Err(Error::shape(levels, lengths.len()));
        }
        let factors = (1..=levels)
            .map(|s| {
                let elev = spec.elevation(s).stacked();
                let len = lengths[s - 1].max(1e-12);
                let t_hat = approx_deformation_operator(
                    spec.degree(s - 1),
                    spec.degree(s),
                    d[s].as_slice(),
                    len,
                )?;
                Ok(elev + t_hat)
            })
            .collect::<Result<Vec<_>>>()?;
        let top = 2 * num_control_points(spec.degree(levels));
        let mut suffix = vec![DMatrix::identity(top, top); levels + 1];
        for r in (0..levels).rev() {
            suffix[r] = &suffix[r + 1] * &factors[r];
        }
        Ok(SweepCache {
            lengths,
            factors,
            suffix,
        })
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    /// `Omega_a^b = (E_b + T^_b) ... (E_a + T^_a)`, mapping level `a - 1`
    /// coordinates to level `b`; the identity on level `b` when `a > b`.
    pub fn composite_omega(&self, a: usize, b: usize) -> Result<DMatrix<f64>> {
        let levels = self.factors.len();
        if b > levels || a == 0 {
            return Err(Error::Domain(format!("composite operator levels ({a}, {b}) outside 1..={levels}")));
        }
        if a > b {
            let dim = if b == 0 { 6 } else { self.factors[b - 1].nrows() };
            return Ok(DMatrix::identity(dim, dim));
        }
        let mut out = self.factors[a - 1].clone();
        for s in a + 1..=b {
            out = &self.factors[s - 1] * out;
        }
        Ok(out)
    }

    /// `Omega_{r+1}^R`.
    pub fn suffix(&self, r: usize) -> &DMatrix<f64> {
        &self.suffix[r]
    }
}

fn broadcast(p: Point, points: usize) -> DVector<f64> {
    DVector::from_iterator(2 * points, (0..points).flat_map(|_| [p[0], p[1]]))
}

/// Exact polygons `c^(r..R)` after replacing `d^(r)` by `d_new`.
pub fn exact_tail(
    spec: &ShapeProcessSpec,
    state: &ShapeState,
    r: usize,
    d_new: &DVector<f64>,
) -> Result<Vec<ControlPolygon>> {
    let levels = spec.levels();
    let mut out = Vec::with_capacity(levels + 1 - r);
    out.push(if r == 0 {
        initial_polygon(state.m, d_new.as_slice())?
    } else {
        process_step_with(&state.polygons[r - 1], r, spec, d_new.as_slice(), TangentPolicy::Fallback)?
    });
    for s in r + 1..=levels {
        let prev = out.last().expect("tail is non-empty");
        out.push(process_step_with(prev, s, spec, state.d[s].as_slice(), TangentPolicy::Fallback)?);
    }
    Ok(out)
}

/// Unnormalized log conditional of `d^(r)` in prior-whitened coordinates
/// `z`, given the exact final polygon it produces.
pub fn log_target(ctx: &ShapeContext, design: &ShapeDesign, z: &DVector<f64>, c_final: &ControlPolygon) -> f64 {
    let c = c_final.to_vector();
    let resid = &design.p - &design.x * &c;
    let mut lp = -0.5 * z.norm_squared() - 0.5 * ctx.tau_p * resid.norm_squared();
    if let Some(w) = &design.w {
        lp -= (w * &c).norm_squared() / (2.0 * ctx.tau2);
    }
    lp
}

/// Draws the center from its exact conditional. The process commutes with
/// translation, so the final polygon moves rigidly with `m` and the update
/// only needs the point likelihood.
pub fn cond_update_m<R: Rng + ?Sized>(
    ctx: &ShapeContext,
    state: &mut ShapeState,
    cache: &SweepCache,
    design: &ShapeDesign,
    rng: &mut R,
) -> Result<Point> {
    let factor = ctx.spec.factor_m();
    if factor.ncols() == 0 {
        return Ok(state.m);
    }
    let post = m_posterior(ctx, state, cache, design)?;
    let x = post.to_x(&post.sample_z(rng));
    let m_new = [x[0], x[1]];
    let shift = [m_new[0] - state.m[0], m_new[1] - state.m[1]];
    state.m = m_new;
    for c in state.polygons.iter_mut() {
        *c = c.translated(shift);
    }
    Ok(m_new)
}

/// Conditional of `m` as a normal in the whitened coordinates of its prior.
pub fn m_posterior(
    ctx: &ShapeContext,
    state: &ShapeState,
    cache: &SweepCache,
    design: &ShapeDesign,
) -> Result<FactorPosterior> {
    let c_final = state.final_polygon();
    // Omega_1^R [I; I; I]: the stacked identity up to rounding
    let stack = DMatrix::from_fn(6, 2, |i, j| if i % 2 == j { 1.0 } else { 0.0 });
    let q = &design.x * (cache.suffix(0) * stack);
    let without_m = c_final.to_vector() - broadcast(state.m, c_final.num_points());
    let y = &design.p - &design.x * without_m;
    let mu_m = DVector::from_vec(ctx.spec.mu_m().to_vec());
    FactorPosterior::new(
        &mu_m,
        ctx.spec.factor_m(),
        &[LinearObservation::new(q, y, ctx.tau_p)?],
    )
}

/// Linearized conditional of `d^(r)` used as the MH proposal.
#[derive(Debug, Clone)]
pub struct DeformationProposal {
    pub level: usize,
    pub posterior: FactorPosterior,
    /// `Omega_{r+1}^R T_r`, the sensitivity of `c^(R)` to `d^(r)`.
    pub gain: DMatrix<f64>,
    /// Whitened current deformation.
    pub z_current: DVector<f64>,
}

pub fn deformation_proposal(
    ctx: &ShapeContext,
    state: &ShapeState,
    cache: &SweepCache,
    design: &ShapeDesign,
    r: usize,
) -> Result<DeformationProposal> {
    let spec = ctx.spec;
    if r > spec.levels() {
        return Err(Error::Domain(format!("level {r} outside 0..={}", spec.levels())));
    }
    let (block, base) = if r == 0 {
        (initial_block().to_matrix(), broadcast(state.m, 3))
    } else {
        let elevated = spec.elevation(r).apply(&state.polygons[r - 1])?;
        (orienting_block_with_fallback(&elevated).to_matrix(), elevated.to_vector())
    };
    let suffix = cache.suffix(r);
    let gain = suffix * block;
    let offset = match ctx.proposal {
        MhProposal::Anchored => state.final_polygon().to_vector() - &gain * &state.d[r],
        MhProposal::Independent => suffix * base,
    };
    let q_points = &design.x * &gain;
    let mut obs = vec![LinearObservation::new(
        q_points,
        &design.p - &design.x * &offset,
        ctx.tau_p,
    )?];
    if let Some(w) = &design.w {
        obs.push(LinearObservation::new(w * &gain, -(w * &offset), 1.0 / ctx.tau2)?);
    }
    let mu = &ctx.mu[r];
    let factor = spec.factor(r);
    let posterior = FactorPosterior::new(mu, factor, &obs)?;
    let z_current = factor_coordinates(factor, &(&state.d[r] - mu));
    Ok(DeformationProposal {
        level: r,
        posterior,
        gain,
        z_current,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhOutcome {
    pub accepted: bool,
    pub log_ratio: f64,
}

/// Accepts or rejects `z_star` against the exact conditional and, on
/// acceptance, writes the deformation and refreshed polygons into `state`.
pub fn mh_correct<R: Rng + ?Sized>(
    ctx: &ShapeContext,
    state: &mut ShapeState,
    design: &ShapeDesign,
    proposal: &DeformationProposal,
    z_star: &DVector<f64>,
    rng: &mut R,
) -> Result<MhOutcome> {
    let r = proposal.level;
    let post = &proposal.posterior;
    let d_star = post.to_x(z_star);
    let tail = exact_tail(ctx.spec, state, r, &d_star)?;
    let c_star = tail.last().expect("tail is non-empty");
    let z_cur = &proposal.z_current;
    let target_star = log_target(ctx, design, z_star, c_star);
    let target_cur = log_target(ctx, design, z_cur, state.final_polygon());
    // the proposal depends on the state through the curve lengths in the
    // approximate factors, so the reverse density is rebuilt at the
    // proposed state
    let mut star = state.clone();
    star.d[r] = d_star.clone();
    for (s, c) in (r..).zip(&tail) {
        star.polygons[s] = c.clone();
    }
    let cache_star = SweepCache::build(ctx.spec, &star)?;
    let reverse = deformation_proposal(ctx, &star, &cache_star, design, r)?;
    let q_forward = post.log_density_z(z_star);
    let q_reverse = reverse.posterior.log_density_z(z_cur);
    let log_ratio = target_star - target_cur + q_reverse - q_forward;
    if !log_ratio.is_finite() {
        warn!("non-finite acceptance ratio at level {r}; rejecting");
        return Ok(MhOutcome {
            accepted: false,
            log_ratio,
        });
    }
    let accepted = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
    if accepted {
        *state = star;
    }
    Ok(MhOutcome { accepted, log_ratio })
}

/// Proposal draw plus MH correction for level `r`, with the approximate
/// factors taken at the current state. Levels with a zero prior covariance
/// stay at their mean and report acceptance.
pub fn cond_update_d_r<R: Rng + ?Sized>(
    ctx: &ShapeContext,
    state: &mut ShapeState,
    design: &ShapeDesign,
    r: usize,
    rng: &mut R,
) -> Result<MhOutcome> {
    if ctx.spec.factor(r).ncols() == 0 {
        return Ok(MhOutcome {
            accepted: true,
            log_ratio: 0.0,
        });
    }
    let cache = SweepCache::build(ctx.spec, state)?;
    let proposal = deformation_proposal(ctx, state, &cache, design, r)?;
    let z_star = proposal.posterior.sample_z(rng);
    mh_correct(ctx, state, design, &proposal, &z_star, rng)
}

/// Deformations that reproduce `polygons` level by level through the exact
/// (fallback) orienting blocks.
pub fn deformations_of(spec: &ShapeProcessSpec, m: Point, polygons: &[ControlPolygon]) -> Result<Vec<DVector<f64>>> {
    if polygons.len() != spec.levels() + 1 {
        return Err(Error::shape(spec.levels() + 1, polygons.len()));
    }
    let rel: Vec<f64> = polygons[0].points().flat_map(|p| [p[0] - m[0], p[1] - m[1]]).collect();
    let mut out = vec![DVector::from_vec(initial_block().apply_transpose(&rel)?)];
    for r in 1..=spec.levels() {
        let elevated = spec.elevation(r).apply(&polygons[r - 1])?;
        let diff: Vec<f64> = polygons[r].coords().iter().zip(elevated.coords()).map(|(a, b)| a - b).collect();
        out.push(DVector::from_vec(orienting_block_with_fallback(&elevated).apply_transpose(&diff)?));
    }
    Ok(out)
}

/// Whitened prior coordinates of every level, or `None` when some level
/// leaves the support of a rank-deficient prior.
fn whitened(spec: &ShapeProcessSpec, mu: &[DVector<f64>], d: &[DVector<f64>]) -> Option<Vec<DVector<f64>>> {
    d.iter()
        .enumerate()
        .map(|(r, dr)| {
            let v = dr - &mu[r];
            let z = factor_coordinates(spec.factor(r), &v);
            let miss = (spec.factor(r) * &z - &v).norm();
            (miss <= 1e-8 * (1.0 + v.norm())).then_some(z)
        })
        .collect()
}

/// Reparameterization move. The curve is restarted at `t + alpha` for a
/// normal `alpha` with standard deviation `scale`: every level's polygon is
/// phase shifted, the deformations are re-derived in the shifted frames and
/// each `t_i` moves by `-alpha`. The fitted point set is unchanged, so the
/// move travels along directions the data cannot see and that the
/// per-level updates explore slowly. The map has unit Jacobian and
/// `alpha` is symmetric, so the ratio is the target ratio alone.
pub fn phase_move<R: Rng + ?Sized>(
    ctx: &ShapeContext,
    state: &mut ShapeState,
    scale: f64,
    rng: &mut R,
) -> Result<MhOutcome> {
    let alpha = scale * rng.sample::<f64, _>(StandardNormal);
    let shifted: Vec<ControlPolygon> = state.polygons.iter().map(|c| c.phase_shifted(alpha)).collect();
    let d_new = deformations_of(ctx.spec, state.m, &shifted)?;
    let (Some(z_new), Some(z_cur)) = (whitened(ctx.spec, ctx.mu, &d_new), whitened(ctx.spec, ctx.mu, &state.d)) else {
        return Ok(MhOutcome {
            accepted: false,
            log_ratio: f64::NEG_INFINITY,
        });
    };
    let ds = d_new.iter().map(|d| d.iter().copied().collect()).collect();
    let traj = build_trajectory(ctx.spec, state.m, ds, TangentPolicy::Fallback)?;
    let t_new: Vec<f64> = state.t.iter().map(|&t| wrap_parameter(t - alpha)).collect();

    let log_lik = |c: &ControlPolygon, t: &[f64]| -> Result<f64> {
        let mut v = -0.5 * ctx.tau_p * sum_squared_residuals(c, ctx.obs.points(), t)?;
        if let Some(th) = ctx.obs.theta() {
            v -= orientation_quadratic(c, th, t)? / (2.0 * ctx.tau2);
        }
        Ok(v)
    };
    let prior = |z: &[DVector<f64>]| -0.5 * z.iter().map(|v| v.norm_squared()).sum::<f64>();
    let log_ratio = log_lik(traj.final_polygon(), &t_new)? - log_lik(state.final_polygon(), &state.t)? + prior(&z_new)
        - prior(&z_cur);
    if !log_ratio.is_finite() {
        warn!("non-finite ratio in the reparameterization move; rejecting");
        return Ok(MhOutcome {
            accepted: false,
            log_ratio,
        });
    }
    let accepted = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
    if accepted {
        state.d = d_new;
        state.polygons = traj.polygons;
        state.t = t_new;
    }
    Ok(MhOutcome { accepted, log_ratio })
}

fn rms_scale(spec: &ShapeProcessSpec, r: usize) -> f64 {
    let f = spec.factor(r);
    (f.norm_squared() / f.nrows().max(1) as f64).sqrt()
}

/// Moves detail between levels `r` and `r + 1` without touching the curve.
/// `d^(r)` takes a random-walk step and `d^(r+1)` is re-derived so that
/// `c^(r+1)`, and with it every finer level, stays where it is. Coarse and
/// fine deformations can trade off against each other, and the data cannot
/// tell them apart. Only the prior separates them, which makes this
/// direction slow for the one-level updates. For a fixed step the map is
/// a shear followed by a rotation, and the step is symmetric, so the ratio
/// is the prior ratio of the two levels.
///
/// `step` is in units of the smaller of the two levels' prior scales.
pub fn resplit_move<R: Rng + ?Sized>(
    ctx: &ShapeContext,
    state: &mut ShapeState,
    r: usize,
    step: f64,
    rng: &mut R,
) -> Result<MhOutcome> {
    let spec = ctx.spec;
    if r >= spec.levels() {
        return Err(Error::Domain(format!("no level above {r} to trade detail with")));
    }
    let factor = spec.factor(r);
    let (here, above) = (rms_scale(spec, r), rms_scale(spec, r + 1));
    if factor.ncols() == 0 || here == 0.0 {
        return Ok(MhOutcome {
            accepted: false,
            log_ratio: f64::NEG_INFINITY,
        });
    }
    let size = step * above.min(here) / here;
    let xi = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let d_r = &state.d[r] + factor * xi * size;
    let c_r = if r == 0 {
        initial_polygon(state.m, d_r.as_slice())?
    } else {
        process_step_with(&state.polygons[r - 1], r, spec, d_r.as_slice(), TangentPolicy::Fallback)?
    };
    let elevated = spec.elevation(r + 1).apply(&c_r)?;
    let diff: Vec<f64> = state.polygons[r + 1]
        .coords()
        .iter()
        .zip(elevated.coords())
        .map(|(a, b)| a - b)
        .collect();
    let d_next = DVector::from_vec(orienting_block_with_fallback(&elevated).apply_transpose(&diff)?);

    let level_prior = |k: usize, d: &DVector<f64>| -> Option<f64> {
        let v = d - &ctx.mu[k];
        let z = factor_coordinates(spec.factor(k), &v);
        let miss = (spec.factor(k) * &z - &v).norm();
        (miss <= 1e-8 * (1.0 + v.norm())).then(|| -0.5 * z.norm_squared())
    };
    let (Some(new_r), Some(new_next), Some(cur_r), Some(cur_next)) = (
        level_prior(r, &d_r),
        level_prior(r + 1, &d_next),
        level_prior(r, &state.d[r]),
        level_prior(r + 1, &state.d[r + 1]),
    ) else {
        return Ok(MhOutcome {
            accepted: false,
            log_ratio: f64::NEG_INFINITY,
        });
    };
    let log_ratio = new_r + new_next - cur_r - cur_next;
    let accepted = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
    if accepted {
        state.d[r] = d_r;
        state.d[r + 1] = d_next;
        state.polygons[r] = c_r;
    }
    Ok(MhOutcome { accepted, log_ratio })
}
