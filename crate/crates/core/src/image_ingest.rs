//! Grayscale rasters to oriented point clouds.
//!
//! Pixel `(a, b)` (column `a`, row `b` counted from the top) maps to the
//! plane point `(a, height - 1 - b)`, so y grows upward and the image frame
//! has the same handedness as curve coordinates. Gradients are expressed in
//! that frame.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::curve::Point;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    /// Row-major intensities, row 0 at the top.
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Domain(format!(
                "image must be at least 2x2, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::shape(width * height, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image intensities must be finite".into()));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let data = (0..height)
            .flat_map(|row| (0..width).map(move |col| (col, row)))
            .map(|(col, row)| f(col, row))
            .collect();
        GrayImage::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Intensity at column `col`, row `row` (row 0 at the top).
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// 3x3 box average, with the window clipped at the borders.
    pub fn box_blur(&self) -> GrayImage {
        let (w, h) = (self.width as isize, self.height as isize);
        let data = (0..h)
            .flat_map(|row| (0..w).map(move |col| (col, row)))
            .map(|(col, row)| {
                let (mut sum, mut count) = (0.0, 0.0);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (r, c) = (row + dr, col + dc);
                        if (0..h).contains(&r) && (0..w).contains(&c) {
                            sum += self.data[(r * w + c) as usize];
                            count += 1.0;
                        }
                    }
                }
                sum / count
            })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Decodes an 8-bit PGM (binary P5 or plain P2).
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
            .map_err(|e| Error::Image(e.to_string()))?;
        match decoded {
            DynamicImage::ImageLuma8(img) => {
                let (w, h) = img.dimensions();
                GrayImage::new(
                    w as usize,
                    h as usize,
                    img.into_raw().into_iter().map(f64::from).collect(),
                )
            }
            other => Err(Error::Image(format!(
                "expected an 8-bit grayscale PGM, got {:?}",
                other.color()
            ))),
        }
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        GrayImage::from_pgm_bytes(&bytes)
    }

    /// Encodes as binary P5, rounding and clamping intensities to 0..=255.
    pub fn to_pgm_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&raw, self.width as u32, self.height as u32, ExtendedColorType::L8)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm_bytes()?)?;
        Ok(())
    }
}

/// Per-pixel gradients `g = (dz/dx, dz/dy)` in the y-up frame and their
/// norms.
#[derive(Debug, Clone)]
pub struct GradientField {
    width: usize,
    height: usize,
    gx: Vec<f64>,
    gy: Vec<f64>,
    norm: Vec<f64>,
}

impl GradientField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gradient(&self, col: usize, row: usize) -> [f64; 2] {
        let i = row * self.width + col;
        [self.gx[i], self.gy[i]]
    }

    pub fn norm(&self, col: usize, row: usize) -> f64 {
        self.norm[row * self.width + col]
    }

    pub fn max_norm(&self) -> f64 {
        self.norm.iter().copied().fold(0.0, f64::max)
    }
}

/// Central differences in the interior, one-sided differences on the
/// border rows and columns.
pub fn gradient_field(img: &GrayImage) -> Result<GradientField> {
    let (w, h) = (img.width(), img.height());
    if w < 2 || h < 2 {
        return Err(Error::Domain(format!("image must be at least 2x2, got {w}x{h}")));
    }
    let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / span as f64;
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let (c0, c1) = (col.saturating_sub(1), (col + 1).min(w - 1));
            let (r0, r1) = (row.saturating_sub(1), (row + 1).min(h - 1));
            let i = row * w + col;
            gx[i] = diff(img.get(c0, row), img.get(c1, row), c1 - c0);
            // rows grow downward, y grows upward
            gy[i] = diff(img.get(col, r1), img.get(col, r0), r1 - r0);
        }
    }
    let norm = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    Ok(GradientField {
        width: w,
        height: h,
        gx,
        gy,
        norm,
    })
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Points with optional gradient angles `omega` and tangent angles `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedPointCloud {
    points: Vec<Point>,
    omega: Option<Vec<f64>>,
    theta: Option<Vec<f64>>,
}

impl OrientedPointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        OrientedPointCloud {
            points,
            omega: None,
            theta: None,
        }
    }

    /// Points with tangent angles only.
    pub fn with_tangents(points: Vec<Point>, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != points.len() {
            return Err(Error::shape(points.len(), theta.len()));
        }
        Ok(OrientedPointCloud {
            points,
            omega: None,
            theta: Some(theta),
        })
    }

    /// Points with gradient angles; tangents are the gradients turned by 90
    /// degrees.
    pub fn with_gradient_angles(points: Vec<Point>, omega: Vec<f64>) -> Result<Self> {
        if omega.len() != points.len() {
            return Err(Error::shape(points.len(), omega.len()));
        }
        let theta = omega.iter().map(|w| wrap_angle(w + PI / 2.0)).collect();
        Ok(OrientedPointCloud {
            points,
            omega: Some(omega),
            theta: Some(theta),
        })
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

    pub fn omega(&self) -> Option<&[f64]> {
        self.omega.as_deref()
    }

    pub fn theta(&self) -> Option<&[f64]> {
        self.theta.as_deref()
    }

    pub fn has_orientations(&self) -> bool {
        self.theta.is_some()
    }

    pub fn without_orientations(&self) -> Self {
        OrientedPointCloud::new(self.points.clone())
    }

    /// Writes `x,y,omega,theta` (or `x,y,theta`, or `x,y`).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        match (&self.omega, &self.theta) {
            (Some(_), Some(_)) => wtr.write_record(["x", "y", "omega", "theta"]),
            (None, Some(_)) => wtr.write_record(["x", "y", "theta"]),
            _ => wtr.write_record(["x", "y"]),
        }
        .map_err(csv_err)?;
        for (i, p) in self.points.iter().enumerate() {
            let mut rec = vec![p[0].to_string(), p[1].to_string()];
            if let Some(w) = &self.omega {
                rec.push(w[i].to_string());
            }
            if let Some(t) = &self.theta {
                rec.push(t[i].to_string());
            }
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads a cloud CSV. The header must start with `x,y`; optional
    /// `omega` and/or `theta` columns carry angles in radians.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
        let (xi, yi) = match (col("x"), col("y")) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::Parse("cloud CSV needs x and y columns".into())),
        };
        let (wi, ti) = (col("omega"), col("theta"));
        let mut points = Vec::new();
        let mut omega = Vec::new();
        let mut theta = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let field = |i: usize| -> Result<f64> {
                let raw = rec.get(i).unwrap_or("");
                let v: f64 = raw.parse().map_err(|_| {
                    Error::Parse(format!("row {}: cannot parse {raw:?} as a number", line + 2))
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Parse(format!("row {}: non-finite value", line + 2)))
                }
            };
            points.push([field(xi)?, field(yi)?]);
            if let Some(i) = wi {
                omega.push(field(i)?);
            }
            if let Some(i) = ti {
                theta.push(field(i)?);
            }
        }
        match (wi, ti) {
            (_, Some(_)) => Ok(OrientedPointCloud {
                points,
                omega: wi.map(|_| omega),
                theta: Some(theta),
            }),
            (Some(_), None) => OrientedPointCloud::with_gradient_angles(points, omega),
            (None, None) => Ok(OrientedPointCloud::new(points)),
        }
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        OrientedPointCloud::read_csv(std::fs::File::open(path)?)
    }
}

/// Every pixel with gradient norm above `threshold` becomes a point, tagged
/// with its gradient angle and the tangent angle 90 degrees from it.
pub fn extract_cloud(field: &GradientField, threshold: f64) -> Result<OrientedPointCloud> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::Domain(format!("threshold must be positive, got {threshold}")));
    }
    let mut points = Vec::new();
    let mut omega = Vec::new();
    for row in 0..field.height {
        for col in 0..field.width {
            if field.norm(col, row) > threshold {
                let g = field.gradient(col, row);
                points.push([col as f64, (field.height - 1 - row) as f64]);
                omega.push(g[1].atan2(g[0]));
            }
        }
    }
    OrientedPointCloud::with_gradient_angles(points, omega)
}

/// Threshold used when none is given: half the largest gradient norm.
pub fn default_threshold(field: &GradientField) -> f64 {
    0.5 * field.max_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk(size: usize, center: Point, radius: f64) -> GrayImage {
        GrayImage::from_fn(size, size, |col, row| {
            let (x, y) = (col as f64, (size - 1 - row) as f64);
            if (x - center[0]).hypot(y - center[1]) <= radius {
                255.0
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn constant_image_has_no_gradient() {
        let img = GrayImage::from_fn(8, 6, |_, _| 42.0).unwrap();
        let f = gradient_field(&img).unwrap();
        assert_eq!(f.max_norm(), 0.0);
        assert!(extract_cloud(&f, 0.1).unwrap().is_empty());
    }

    #[test]
    fn ramp_gradient_is_exact() {
        let img = GrayImage::from_fn(9, 7, |col, _| col as f64).unwrap();
        let f = gradient_field(&img).unwrap();
        for row in 0..7 {
            for col in 0..9 {
                let g = f.gradient(col, row);
                assert!((g[0] - 1.0).abs() < 1e-15 && g[1].abs() < 1e-15);
            }
        }
        // intensity increasing downward decreases with y
        let img = GrayImage::from_fn(5, 5, |_, row| 2.0 * row as f64).unwrap();
        let g = gradient_field(&img).unwrap().gradient(2, 2);
        assert!((g[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn small_images_rejected() {
        assert!(matches!(GrayImage::new(1, 5, vec![0.0; 5]), Err(Error::Domain(_))));
    }

    /// Disk with 8x8 supersampled coverage.
    fn smooth_disk(size: usize, center: Point, radius: f64) -> GrayImage {
        let s = 8;
        GrayImage::from_fn(size, size, |col, row| {
            let (x, y) = (col as f64, (size - 1 - row) as f64);
            let mut hit = 0;
            for i in 0..s {
                for j in 0..s {
                    let dx = x + (i as f64 + 0.5) / s as f64 - 0.5 - center[0];
                    let dy = y + (j as f64 + 0.5) / s as f64 - 0.5 - center[1];
                    if dx.hypot(dy) <= radius {
                        hit += 1;
                    }
                }
            }
            255.0 * hit as f64 / (s * s) as f64
        })
        .unwrap()
    }

    #[test]
    fn disk_gradients_are_radial() {
        let center = [63.5, 63.5];
        let img = smooth_disk(128, center, 30.0).box_blur();
        let f = gradient_field(&img).unwrap();
        let cloud = extract_cloud(&f, default_threshold(&f)).unwrap();
        assert!(cloud.len() > 100);
        for (p, w) in cloud.points().iter().zip(cloud.omega().unwrap()) {
            let radial = (p[1] - center[1]).atan2(p[0] - center[0]);
            // bright inside: gradient points inward
            let off = wrap_angle(w - radial - PI).abs();
            assert!(off < 10f64.to_radians(), "gradient off radial by {off}");
        }
    }

    #[test]
    fn binary_disk_points_hug_boundary() {
        let center = [63.5, 63.5];
        let f = gradient_field(&disk(128, center, 30.0)).unwrap();
        let cloud = extract_cloud(&f, default_threshold(&f)).unwrap();
        assert!(cloud.len() > 100);
        for p in cloud.points() {
            let r = (p[0] - center[0]).hypot(p[1] - center[1]);
            assert!((r - 30.0).abs() <= 1.5, "point at radius {r}");
        }
    }

    #[test]
    fn tangent_is_gradient_turned() {
        let img = disk(64, [31.5, 31.5], 15.0);
        let f = gradient_field(&img).unwrap();
        let cloud = extract_cloud(&f, 0.3 * f.max_norm()).unwrap();
        for (w, t) in cloud.omega().unwrap().iter().zip(cloud.theta().unwrap()) {
            assert!(wrap_angle(t - w - PI / 2.0).abs() < 1e-12);
            assert!(*t > -PI && *t <= PI);
        }
    }

    #[test]
    fn csv_round_trip_and_headers() {
        let cloud = OrientedPointCloud::with_gradient_angles(vec![[1.0, 2.0], [3.5, -1.0]], vec![0.1, -2.0]).unwrap();
        let text = cloud.to_csv_string().unwrap();
        assert!(text.starts_with("x,y,omega,theta\n"));
        let back = OrientedPointCloud::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, cloud);
        let bare = OrientedPointCloud::read_csv("x,y\n0,1\n2,3\n".as_bytes()).unwrap();
        assert_eq!(bare.len(), 2);
        assert!(!bare.has_orientations());
        assert!(bare.to_csv_string().unwrap().starts_with("x,y\n"));
        assert!(OrientedPointCloud::read_csv("a,b\n1,2\n".as_bytes()).is_err());
        assert!(OrientedPointCloud::read_csv("x,y\n1,zz\n".as_bytes()).is_err());
    }

    #[test]
    fn pgm_round_trip_and_plain_format() {
        let img = GrayImage::from_fn(5, 4, |c, r| (c * 10 + r) as f64).unwrap();
        let back = GrayImage::from_pgm_bytes(&img.to_pgm_bytes().unwrap()).unwrap();
        assert_eq!(back, img);
        let plain = b"P2\n# comment\n3 2\n255\n0 10 20\n30 40 255\n";
        let p = GrayImage::from_pgm_bytes(plain).unwrap();
        assert_eq!((p.width(), p.height()), (3, 2));
        assert_eq!(p.get(2, 1), 255.0);
        assert!(GrayImage::from_pgm_bytes(b"not an image").is_err());
    }

    #[test]
    fn rotating_raster_rotates_gradient_angles() {
        // a bright quadrant; rotating the raster by 90 degrees counter-
        // clockwise turns every gradient by +90 degrees
        let n = 32;
        let img = GrayImage::from_fn(n, n, |c, r| if c > 12 && r > 18 { 200.0 } else { 10.0 }).unwrap();
        let rot = GrayImage::from_fn(n, n, |c, r| img.get(n - 1 - r, c)).unwrap();
        let (f, g) = (gradient_field(&img).unwrap(), gradient_field(&rot).unwrap());
        for row in 1..n - 1 {
            for col in 1..n - 1 {
                let a = f.gradient(col, row);
                // pixel (col,row) of img lands at (row, n-1-col) of rot
                let b = g.gradient(row, n - 1 - col);
                assert!((b[0] + a[1]).abs() < 1e-12 && (b[1] - a[0]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn threshold_monotone(lo in 0.05f64..0.9, hi in 0.05f64..0.9, seed in 0u32..50) {
            let img = GrayImage::from_fn(24, 20, |c, r| {
                (((c as u32 * 7 + r as u32 * 13 + seed) % 17) as f64).powi(2)
            }).unwrap();
            let f = gradient_field(&img).unwrap();
            let (lo, hi) = if lo < hi { (lo, hi) } else { (hi, lo) };
            let a = extract_cloud(&f, lo * f.max_norm()).unwrap();
            let b = extract_cloud(&f, hi * f.max_norm()).unwrap();
            prop_assert!(b.points().iter().all(|p| a.points().contains(p)));
        }

        #[test]
        fn linear_intensity_has_constant_interior_gradient(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let img = GrayImage::from_fn(10, 8, |c, r| a * c as f64 + b * r as f64).unwrap();
            let f = gradient_field(&img).unwrap();
            for row in 1..7 {
                for col in 1..9 {
                    let g = f.gradient(col, row);
                    prop_assert!((g[0] - a).abs() < 1e-12 && (g[1] + b).abs() < 1e-12);
                }
            }
        }
    }
}
