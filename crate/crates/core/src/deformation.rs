//! Deformation-orienting rotation blocks and control-point deformations.
//!
//! A deformation vector is stacked like a control polygon. For each control
//! point, its x-component moves the point along the curve tangent at the
//! point's influence location and its y-component moves it along the
//! outward normal.

use std::f64::consts::PI;

use log::warn;
use nalgebra::DMatrix;

use crate::curve::{influence_point, num_control_points, ControlPolygon, RothBasis};
use crate::error::{Error, Result};

/// Hodograph norms below this are treated as a vanishing tangent.
pub const DEGENERATE_TANGENT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationVector(Vec<f64>);

impl DeformationVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::Domain("deformation vector must have even length".into()));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("deformation entries must be finite".into()));
        }
        Ok(DeformationVector(coords))
    }

    pub fn zeros(points: usize) -> Self {
        DeformationVector(vec![0.0; 2 * points])
    }

    /// The same 2-vector at every control point.
    pub fn uniform(points: usize, d: [f64; 2]) -> Self {
        DeformationVector((0..points).flat_map(|_| d).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn num_points(&self) -> usize {
        self.0.len() / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockKind {
    Exact,
    /// Linear-in-the-polygon approximation with the given curve length.
    Approx { length: f64 },
}

/// Block-diagonal `T = block(R_1, ..., R_J)` of 2x2 blocks, each stored
/// row-major as `[[a, b], [c, d]]`.
#[derive(Debug, Clone)]
pub struct OrientingBlock {
    blocks: Vec<[[f64; 2]; 2]>,
    kind: BlockKind,
}

fn rotation(theta: f64) -> [[f64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

impl OrientingBlock {
    pub fn from_angles(angles: &[f64]) -> Self {
        OrientingBlock {
            blocks: angles.iter().map(|&a| rotation(a)).collect(),
            kind: BlockKind::Exact,
        }
    }

    pub fn blocks(&self) -> &[[[f64; 2]; 2]] {
        &self.blocks
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn num_points(&self) -> usize {
        self.blocks.len()
    }

    /// `T d`.
    pub fn apply(&self, d: &[f64]) -> Result<Vec<f64>> {
        if d.len() != 2 * self.blocks.len() {
            return Err(Error::shape(2 * self.blocks.len(), d.len()));
        }
        Ok(self
            .blocks
            .iter()
            .zip(d.chunks_exact(2))
            .flat_map(|(b, v)| {
                [
                    b[0][0] * v[0] + b[0][1] * v[1],
                    b[1][0] * v[0] + b[1][1] * v[1],
                ]
            })
            .collect())
    }

    /// `T' v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != 2 * self.blocks.len() {
            return Err(Error::shape(2 * self.blocks.len(), v.len()));
        }
        Ok(self
            .blocks
            .iter()
            .zip(v.chunks_exact(2))
            .flat_map(|(b, v)| {
                [
                    b[0][0] * v[0] + b[1][0] * v[1],
                    b[0][1] * v[0] + b[1][1] * v[1],
                ]
            })
            .collect())
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = 2 * self.blocks.len();
        let mut m = DMatrix::zeros(n, n);
        for (j, b) in self.blocks.iter().enumerate() {
            for r in 0..2 {
                for c in 0..2 {
                    m[(2 * j + r, 2 * j + c)] = b[r][c];
                }
            }
        }
        m
    }
}

fn hodograph_at(c: &ControlPolygon, basis: &RothBasis, t: f64, scratch: &mut [f64]) -> [f64; 2] {
    basis.derivatives_into(t, scratch);
    scratch
        .iter()
        .zip(c.coords().chunks_exact(2))
        .fold([0.0, 0.0], |acc, (w, p)| [acc[0] + w * p[0], acc[1] + w * p[1]])
}

/// Tangent angle of the curve at the influence point `q_j` of control point
/// `j` (1-based), as the quadrant-aware angle of the hodograph.
pub fn tangent_angle(c: &ControlPolygon, j: usize) -> Result<f64> {
    let count = c.num_points();
    if j < 1 || j > count {
        return Err(Error::Index { index: j, max: count });
    }
    let h = c.hodograph(influence_point(c.degree(), j - 1));
    if h[0].hypot(h[1]) < DEGENERATE_TANGENT {
        return Err(Error::DegenerateTangent { j });
    }
    Ok(h[1].atan2(h[0]))
}

/// Rotation blocks `R_j(theta_j)` at every control point of `c`.
pub fn orienting_block_exact(c: &ControlPolygon) -> Result<OrientingBlock> {
    let angles = (1..=c.num_points())
        .map(|j| tangent_angle(c, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(OrientingBlock::from_angles(&angles))
}

/// Like [`orienting_block_exact`], but a vanishing tangent at `q_j` is
/// replaced by the tangent at the nearest curve parameter (searching
/// outward on a fine grid) where the hodograph does not vanish. A curve
/// that is stationary everywhere gets angle zero.
pub fn orienting_block_with_fallback(c: &ControlPolygon) -> OrientingBlock {
    let basis = c.basis();
    let count = c.num_points();
    let mut scratch = vec![0.0; count];
    let step = 2.0 * PI / (64 * count) as f64;
    let angles = (0..count)
        .map(|j0| {
            let q = influence_point(c.degree(), j0);
            let h = hodograph_at(c, &basis, q, &mut scratch);
            if h[0].hypot(h[1]) >= DEGENERATE_TANGENT {
                return h[1].atan2(h[0]);
            }
            warn!("degenerate tangent at control point {}; searching nearby", j0 + 1);
            for k in 1..=(32 * count) {
                for t in [q + step * k as f64, q - step * k as f64] {
                    let h = hodograph_at(c, &basis, t, &mut scratch);
                    if h[0].hypot(h[1]) >= DEGENERATE_TANGENT {
                        return h[1].atan2(h[0]);
                    }
                }
            }
            0.0
        })
        .collect::<Vec<_>>();
    OrientingBlock::from_angles(&angles)
}

/// Approximate blocks `(2 pi / L_A) [[Hx, -Hy], [Hy, Hx]]` with the
/// hodograph evaluated at each influence point `q_j` of `c`.
pub fn orienting_block_approx(c: &ControlPolygon, length: f64) -> Result<OrientingBlock> {
    orienting_block_approx_at(c, c.degree(), length)
}

/// Approximate blocks for a `target_degree` polygon, evaluated on the curve
/// traced by `c`. Degree elevation leaves the curve unchanged, so this
/// equals the approximate block of the elevated polygon.
pub fn orienting_block_approx_at(
    c: &ControlPolygon,
    target_degree: usize,
    length: f64,
) -> Result<OrientingBlock> {
    if !(length > 0.0) || !length.is_finite() {
        return Err(Error::Domain(format!("approximate curve length must be positive, got {length}")));
    }
    let basis = c.basis();
    let mut scratch = vec![0.0; c.num_points()];
    let scale = 2.0 * PI / length;
    let blocks = (0..num_control_points(target_degree))
        .map(|j0| {
            let h = hodograph_at(c, &basis, influence_point(target_degree, j0), &mut scratch);
            let (hx, hy) = (scale * h[0], scale * h[1]);
            [[hx, -hy], [hy, hx]]
        })
        .collect();
    Ok(OrientingBlock {
        blocks,
        kind: BlockKind::Approx { length },
    })
}

/// The linear map `c -> T~(c) d` for a fixed deformation `d` at
/// `target_degree`, as a `2 J_target x 2 J_source` matrix acting on the
/// stacked coordinates of a degree-`source_degree` polygon.
pub fn approx_deformation_operator(
    source_degree: usize,
    target_degree: usize,
    d: &[f64],
    length: f64,
) -> Result<DMatrix<f64>> {
    let j_target = num_control_points(target_degree);
    if d.len() != 2 * j_target {
        return Err(Error::shape(2 * j_target, d.len()));
    }
    if !(length > 0.0) || !length.is_finite() {
        return Err(Error::Domain(format!("approximate curve length must be positive, got {length}")));
    }
    let basis = RothBasis::new(source_degree)?;
    let j_source = basis.num_points();
    let scale = 2.0 * PI / length;
    let mut deriv = vec![0.0; j_source];
    let mut m = DMatrix::zeros(2 * j_target, 2 * j_source);
    for j0 in 0..j_target {
        basis.derivatives_into(influence_point(target_degree, j0), &mut deriv);
        let (dx, dy) = (scale * d[2 * j0], scale * d[2 * j0 + 1]);
        for (i, &w) in deriv.iter().enumerate() {
            m[(2 * j0, 2 * i)] = dx * w;
            m[(2 * j0, 2 * i + 1)] = -dy * w;
            m[(2 * j0 + 1, 2 * i)] = dy * w;
            m[(2 * j0 + 1, 2 * i + 1)] = dx * w;
        }
    }
    Ok(m)
}

/// `c + T d`.
pub fn apply_deformation(
    c: &ControlPolygon,
    d: &DeformationVector,
    block: &OrientingBlock,
) -> Result<ControlPolygon> {
    if d.num_points() != c.num_points() {
        return Err(Error::shape(2 * c.num_points(), d.as_slice().len()));
    }
    let shift = block.apply(d.as_slice())?;
    let coords = c.coords().iter().zip(&shift).map(|(a, b)| a + b).collect();
    ControlPolygon::new(c.degree(), coords)
}
