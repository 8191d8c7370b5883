#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

use rothshape::curve::Point;
use rothshape::image_ingest::GrayImage;

pub fn rothshape(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_rothshape"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn write_cloud(path: &Path, points: &[Point]) {
    let mut s = String::from("x,y\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p[0], p[1]));
    }
    std::fs::write(path, s).unwrap();
}

pub fn circle_points(center: Point, radius: f64, n: usize) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

/// Disk of value 255 on 0 with 8x8 supersampled edges, `y` up from the
/// bottom row.
pub fn disk_image(size: usize, center: Point, radius: f64) -> GrayImage {
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

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Vertices of the first `<polygon>` in an SVG document.
pub fn svg_polygon(svg: &str) -> Vec<Point> {
    let doc = roxmltree::Document::parse(svg).expect("valid XML");
    let poly = doc.descendants().find(|n| n.has_tag_name("polygon")).expect("polygon element");
    poly.attribute("points")
        .unwrap()
        .split_whitespace()
        .map(|pair| {
            let mut it = pair.split(',').map(|v| v.parse::<f64>().unwrap());
            [it.next().unwrap(), it.next().unwrap()]
        })
        .collect()
}
