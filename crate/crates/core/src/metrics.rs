//! Distances between curves and Monte Carlo error estimates.

use crate::curve::{ArcLengthMap, ControlPolygon, Point};
use crate::error::{Error, Result};

/// Symmetric Hausdorff distance between two finite point sets.
pub fn hausdorff(a: &[Point], b: &[Point]) -> f64 {
    directed_hausdorff(a, b).max(directed_hausdorff(b, a))
}

fn directed_hausdorff(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Hausdorff distance between two curves, each sampled at `samples`
/// uniform parameter values.
pub fn curve_hausdorff(a: &ControlPolygon, b: &ControlPolygon, samples: usize) -> f64 {
    let pa: Vec<Point> = a.sample(samples).into_iter().map(|(_, p)| p).collect();
    let pb: Vec<Point> = b.sample(samples).into_iter().map(|(_, p)| p).collect();
    hausdorff(&pa, &pb)
}

/// `count` points equally spaced in arc length, starting at `t = -pi`.
pub fn arc_length_samples(c: &ControlPolygon, count: usize) -> Result<Vec<Point>> {
    if count == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let map = ArcLengthMap::new(c, 2048)?;
    let total = map.total();
    (0..count)
        .map(|k| Ok(c.eval(map.inverse(total * k as f64 / count as f64)?)))
        .collect()
}

/// Which similarity transforms [`procrustes`] may apply to `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Translation and rotation.
    Rigid,
    /// Translation, rotation and isotropic scale.
    Similarity,
}

/// RMS distance between corresponding points after aligning `b` onto `a`.
pub fn procrustes(a: &[Point], b: &[Point], alignment: Alignment) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Domain("empty point sets".into()));
    }
    let ca = centered(a);
    let cb = centered(b);
    let saa: f64 = ca.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum();
    let sbb: f64 = cb.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum();
    Ok(aligned_residual(&ca, &cb, saa, sbb, 0, alignment) / (a.len() as f64).sqrt())
}

fn centered(a: &[Point]) -> Vec<Point> {
    let n = a.len() as f64;
    let c = a.iter().fold([0.0, 0.0], |s, p| [s[0] + p[0] / n, s[1] + p[1] / n]);
    a.iter().map(|p| [p[0] - c[0], p[1] - c[1]]).collect()
}

// sqrt of the minimal sum of squares with b cyclically shifted by `shift`;
// points are treated as complex numbers so the optimal rotation is the
// argument of sum a conj(b)
fn aligned_residual(a: &[Point], b: &[Point], saa: f64, sbb: f64, shift: usize, alignment: Alignment) -> f64 {
    let n = a.len();
    let (mut re, mut im) = (0.0, 0.0);
    for (i, p) in a.iter().enumerate() {
        let q = b[(i + shift) % n];
        re += p[0] * q[0] + p[1] * q[1];
        im += p[1] * q[0] - p[0] * q[1];
    }
    let cross = re.hypot(im);
    let ss = match alignment {
        Alignment::Rigid => saa + sbb - 2.0 * cross,
        Alignment::Similarity if sbb > 0.0 => saa - cross * cross / sbb,
        Alignment::Similarity => saa,
    };
    ss.max(0.0).sqrt()
}

/// Procrustes distance between two closed curves: both are resampled at
/// `count` arc-length-equispaced points and the best cyclic shift of the
/// starting point is used.
pub fn curve_procrustes(a: &ControlPolygon, b: &ControlPolygon, count: usize, alignment: Alignment) -> Result<f64> {
    let ca = centered(&arc_length_samples(a, count)?);
    let cb = centered(&arc_length_samples(b, count)?);
    let saa: f64 = ca.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum();
    let sbb: f64 = cb.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum();
    let best = (0..count)
        .map(|s| aligned_residual(&ca, &cb, saa, sbb, s, alignment))
        .fold(f64::INFINITY, f64::min);
    Ok(best / (count as f64).sqrt())
}

/// Centroid of the curve with respect to arc length, and the mean distance
/// from it.
pub fn center_and_mean_radius(c: &ControlPolygon, count: usize) -> Result<(Point, f64)> {
    let pts = arc_length_samples(c, count)?;
    let n = pts.len() as f64;
    let center = pts.iter().fold([0.0, 0.0], |s, p| [s[0] + p[0] / n, s[1] + p[1] / n]);
    let r = pts.iter().map(|p| (p[0] - center[0]).hypot(p[1] - center[1])).sum::<f64>() / n;
    Ok((center, r))
}

/// Mean and batch-means standard error using `floor(sqrt(n))` batches.
pub fn batch_means(x: &[f64]) -> (f64, f64) {
    let batches = ((x.len() as f64).sqrt().floor() as usize).max(1);
    batch_means_with(x, batches)
}

/// Mean and batch-means standard error with an explicit batch count.
/// Trailing draws that do not fill a batch are dropped from the error
/// estimate but kept in the mean.
pub fn batch_means_with(x: &[f64], batches: usize) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let size = n / batches.max(1);
    if batches < 2 || size == 0 {
        return (mean, f64::NAN);
    }
    let means: Vec<f64> = x
        .chunks_exact(size)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn circle(center: Point, radius: f64) -> ControlPolygon {
        let pts: Vec<Point> = (0..3)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / 3.0;
                [center[0] + 2.0 * radius * a.cos(), center[1] + 2.0 * radius * a.sin()]
            })
            .collect();
        ControlPolygon::from_points(&pts).unwrap()
    }

    #[test]
    fn hausdorff_of_concentric_circles() {
        let d = curve_hausdorff(&circle([0.0, 0.0], 1.0), &circle([0.0, 0.0], 1.3), 2000);
        assert!((d - 0.3).abs() < 1e-6);
        assert_eq!(hausdorff(&[[0.0, 0.0]], &[[3.0, 4.0]]), 5.0);
    }

    #[test]
    fn procrustes_ignores_rigid_motion_and_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = ControlPolygon::new(2, coords).unwrap();
        let (s, c) = 0.7f64.sin_cos();
        let moved: Vec<Point> = a.points().map(|p| [c * p[0] - s * p[1] + 4.0, s * p[0] + c * p[1] - 2.0]).collect();
        let b = ControlPolygon::from_points(&moved).unwrap();
        assert!(curve_procrustes(&a, &b, 200, Alignment::Rigid).unwrap() < 1e-6);
        let pa = arc_length_samples(&a, 50).unwrap();
        let mut pb: Vec<Point> = pa.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect();
        assert!(procrustes(&pa, &pb, Alignment::Similarity).unwrap() < 1e-9);
        assert!(procrustes(&pa, &pb, Alignment::Rigid).unwrap() > 0.1);
        pb.rotate_left(7);
        assert!(procrustes(&pa, &pb, Alignment::Similarity).unwrap() > 0.1);
    }

    #[test]
    fn circle_center_and_radius() {
        let (c, r) = center_and_mean_radius(&circle([3.0, -1.0], 2.5), 400).unwrap();
        assert!((c[0] - 3.0).abs() < 1e-9 && (c[1] + 1.0).abs() < 1e-9);
        assert!((r - 2.5).abs() < 1e-9);
    }

    #[test]
    fn batch_means_matches_iid_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..40_000).map(|_| rng.random::<f64>()).collect();
        let (m, se) = batch_means(&x);
        let iid = (1.0 / 12.0 / 40_000.0f64).sqrt();
        assert!((m - 0.5).abs() < 4.0 * iid);
        assert!(se > 0.6 * iid && se < 1.4 * iid, "{se} vs {iid}");
    }
}
