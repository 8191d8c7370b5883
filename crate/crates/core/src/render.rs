//! SVG renders and CSV sample export.

use std::fmt::Write as _;
use std::io::Write;

use crate::curve::{ControlPolygon, Point};
use crate::error::Result;

/// Maps curve coordinates (y up) to SVG user units (y down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub min: Point,
    pub max: Point,
    pub scale: f64,
    pub margin: f64,
}

impl Viewport {
    /// Fits the bounding box of `points` into a `size` x `size` canvas,
    /// keeping the aspect ratio.
    pub fn fit(points: &[Point], size: f64) -> Viewport {
        let margin = 0.05 * size;
        let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
            for i in 0..2 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        if !(min[0] <= max[0]) {
            min = [-1.0, -1.0];
            max = [1.0, 1.0];
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-12);
        Viewport {
            min,
            max,
            scale: (size - 2.0 * margin) / span,
            margin,
        }
    }

    pub fn width(&self) -> f64 {
        (self.max[0] - self.min[0]) * self.scale + 2.0 * self.margin
    }

    pub fn height(&self) -> f64 {
        (self.max[1] - self.min[1]) * self.scale + 2.0 * self.margin
    }

    pub fn to_screen(&self, p: Point) -> Point {
        [
            self.margin + (p[0] - self.min[0]) * self.scale,
            self.margin + (self.max[1] - p[1]) * self.scale,
        ]
    }

    pub fn from_screen(&self, q: Point) -> Point {
        [
            self.min[0] + (q[0] - self.margin) / self.scale,
            self.max[1] - (q[1] - self.margin) / self.scale,
        ]
    }
}

/// One curve in a [`Scene`].
#[derive(Debug, Clone)]
pub struct CurveLayer {
    pub polygon: ControlPolygon,
    pub stroke: String,
    pub show_control: bool,
}

/// Curves and an optional point overlay.
#[derive(Debug, Clone)]
pub struct Scene {
    pub curves: Vec<CurveLayer>,
    pub points: Vec<Point>,
    pub samples: usize,
    pub size: f64,
}

impl Scene {
    pub fn new(samples: usize) -> Scene {
        Scene {
            curves: Vec::new(),
            points: Vec::new(),
            samples,
            size: 512.0,
        }
    }

    pub fn curve(mut self, polygon: &ControlPolygon, stroke: &str) -> Scene {
        self.curves.push(CurveLayer {
            polygon: polygon.clone(),
            stroke: stroke.to_string(),
            show_control: true,
        });
        self
    }

    pub fn points(mut self, points: &[Point]) -> Scene {
        self.points = points.to_vec();
        self
    }

    /// Viewport covering every sampled curve point, control point and
    /// overlay point.
    pub fn viewport(&self) -> Viewport {
        let mut all = self.points.clone();
        for layer in &self.curves {
            all.extend(layer.polygon.sample(self.samples.max(64)).into_iter().map(|(_, p)| p));
            if layer.show_control {
                all.extend(layer.polygon.points());
            }
        }
        Viewport::fit(&all, self.size)
    }

    pub fn to_svg(&self) -> String {
        let vp = self.viewport();
        let (w, h) = (vp.width(), vp.height());
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.2}" height="{h:.2}" viewBox="0 0 {w:.2} {h:.2}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        if !self.points.is_empty() {
            let _ = writeln!(s, r##"<g fill="#444" fill-opacity="0.6">"##);
            for &p in &self.points {
                let q = vp.to_screen(p);
                let _ = writeln!(s, r#"<circle cx="{:.4}" cy="{:.4}" r="1.2"/>"#, q[0], q[1]);
            }
            let _ = writeln!(s, "</g>");
        }
        for layer in &self.curves {
            if layer.show_control {
                let _ = writeln!(s, r##"<g fill="{}" fill-opacity="0.25">"##, layer.stroke);
                for p in layer.polygon.points() {
                    let q = vp.to_screen(p);
                    let _ = writeln!(s, r#"<circle cx="{:.4}" cy="{:.4}" r="3"/>"#, q[0], q[1]);
                }
                let _ = writeln!(s, "</g>");
            }
            let pts: Vec<String> = layer
                .polygon
                .sample(self.samples)
                .into_iter()
                .map(|(_, p)| {
                    let q = vp.to_screen(p);
                    format!("{:.4},{:.4}", q[0], q[1])
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                pts.join(" "),
                layer.stroke
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// SVG of a single curve with its control points.
pub fn render_polygon(c: &ControlPolygon, samples: usize) -> String {
    Scene::new(samples).curve(c, "#1f4e9a").to_svg()
}

/// Rows `t,x,y` at `samples` uniform parameter values.
pub fn write_samples_csv<W: Write>(c: &ControlPolygon, samples: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "x", "y"]).map_err(csv_err)?;
    for (t, p) in c.sample(samples) {
        w.write_record([t.to_string(), p[0].to_string(), p[1].to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Parse(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn circle(radius: f64) -> ControlPolygon {
        let pts: Vec<Point> = (0..3)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / 3.0;
                [2.0 * radius * a.cos(), 2.0 * radius * a.sin()]
            })
            .collect();
        ControlPolygon::from_points(&pts).unwrap()
    }

    #[test]
    fn viewport_round_trips_and_flips_y() {
        let vp = Viewport::fit(&[[0.0, 0.0], [2.0, 1.0]], 100.0);
        let lo = vp.to_screen([0.0, 0.0]);
        let hi = vp.to_screen([0.0, 1.0]);
        assert!(hi[1] < lo[1]);
        let p = vp.from_screen(vp.to_screen([1.3, 0.4]));
        assert!((p[0] - 1.3).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn polygon_has_requested_vertices() {
        let svg = render_polygon(&circle(1.0), 4);
        let line = svg.lines().find(|l| l.starts_with("<polygon")).unwrap();
        let pts = line.split('"').nth(1).unwrap();
        assert_eq!(pts.split(' ').count(), 4);
    }

    #[test]
    fn samples_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_samples_csv(&circle(2.0), 8, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x,y");
        assert_eq!(lines.len(), 9);
        let v: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[0] + PI).abs() < 1e-12);
        assert!((v[1].hypot(v[2]) - 2.0).abs() < 1e-9);
    }
}
