mod common;

use common::*;
use rothshape::curve::ControlPolygon;
use rothshape::metrics::{curve_hausdorff, curve_procrustes, Alignment};
use rothshape::process::ShapeTrajectory;

const QUICK: [&str; 6] = ["--iters", "600", "--burnin", "150", "--seed", "11"];

fn fit_args<'a>(cmd: &'a str, input: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut v = vec![cmd, input, "--out", out];
    v.extend_from_slice(&QUICK);
    v
}

#[test]
fn sample_count_zero_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let spec = fixtures().join("specs/star.json");
    let o = rothshape(&["sample", "--spec", path_str(&spec), "--count", "0", "--seed", "1", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn sample_is_deterministic_and_prints_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fixtures().join("specs/moon.json");
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = rothshape(&["sample", "--spec", path_str(&spec), "--count", "3", "--seed", "9", "--out", path_str(&out)]);
            assert!(o.status.success());
            assert!(stdout(&o).contains("seed 9"));
            out
        })
        .collect();
    for k in 0..3 {
        for ext in ["json", "svg"] {
            let name = format!("shape_{k:03}.{ext}");
            assert_eq!(std::fs::read(runs[0].join(&name)).unwrap(), std::fs::read(runs[1].join(&name)).unwrap());
        }
    }
}

#[test]
fn malformed_spec_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, r#"{"R": 1, "sigma": [{"diag": 0.1}]}"#).unwrap();
    let o = rothshape(&["sample", "--spec", path_str(&spec), "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sigma"), "{}", stderr(&o));
}

fn load_population(dir: &std::path::Path) -> Vec<ControlPolygon> {
    (0..6)
        .map(|k| {
            let text = std::fs::read_to_string(dir.join(format!("shape_{k:03}.json"))).unwrap();
            let t: ShapeTrajectory = serde_json::from_str(&text).unwrap();
            t.final_polygon().clone()
        })
        .collect()
}

#[test]
fn saved_moon_and_star_populations_regenerate() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["moon", "star"] {
        let spec = fixtures().join(format!("specs/{name}.json"));
        let out = dir.path().join(name);
        let o = rothshape(&["sample", "--spec", path_str(&spec), "--count", "6", "--seed", "4", "--out", path_str(&out)]);
        assert!(o.status.success());
        let fresh = load_population(&out);
        let saved = load_population(&fixtures().join(format!("populations/{name}")));
        for (a, b) in fresh.iter().zip(&saved) {
            for (x, y) in a.coords().iter().zip(b.coords()) {
                assert!((x - y).abs() < 1e-9, "{name}: {x} vs {y}");
            }
        }
    }
    // every moon is closer to every other moon than to any star, and the
    // same for stars
    let moons = load_population(&fixtures().join("populations/moon"));
    let stars = load_population(&fixtures().join("populations/star"));
    let d = |a: &ControlPolygon, b: &ControlPolygon| curve_procrustes(a, b, 128, Alignment::Similarity).unwrap();
    let within = moons
        .iter()
        .flat_map(|a| moons.iter().map(move |b| (a, b)))
        .chain(stars.iter().flat_map(|a| stars.iter().map(move |b| (a, b))))
        .map(|(a, b)| d(a, b))
        .fold(0.0, f64::max);
    let between = moons
        .iter()
        .flat_map(|a| stars.iter().map(move |b| (a, b)))
        .map(|(a, b)| d(a, b))
        .fold(f64::INFINITY, f64::min);
    assert!(between > within, "between {between} within {within}");
}

#[test]
fn fit_points_recovers_noiseless_circle() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("circle.csv");
    let radius = 2.0;
    write_cloud(&cloud, &circle_points([3.0, 1.0], radius, 100));
    let out = dir.path().join("fit");
    let o = rothshape(&fit_args("fit-points", path_str(&cloud), path_str(&out)));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed 11"));
    let summary = read_json(&out.join("summary.json"));
    assert!(summary["tau_p"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["orientations"], false);
    let fit: ControlPolygon = serde_json::from_value(read_json(&out.join("fit.json"))).unwrap();
    // control points at twice the radius trace the circle
    let truth = ControlPolygon::from_points(&circle_points([3.0, 1.0], 2.0 * radius, 3)).unwrap();
    let h = curve_hausdorff(&fit, &truth, 2000);
    assert!(h < 1e-2 * radius, "hausdorff {h}");
    assert_eq!(std::fs::read_to_string(out.join("chain.jsonl")).unwrap().lines().count(), 450);
    roxmltree::Document::parse(&std::fs::read_to_string(out.join("fit.svg")).unwrap()).unwrap();
}

#[test]
fn orientation_columns_switch_on_the_angle_likelihood() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("circle.csv");
    let mut s = String::from("x,y,theta\n");
    for p in circle_points([0.0, 0.0], 1.0, 60) {
        // clockwise travel
        let theta = (p[0]).atan2(-p[1]);
        s.push_str(&format!("{},{},{}\n", p[0], p[1], theta));
    }
    std::fs::write(&cloud, s).unwrap();
    let out = dir.path().join("fit");
    let o = rothshape(&fit_args("fit-points", path_str(&cloud), path_str(&out)));
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["orientations"], true);
    assert!(summary["tau2"].as_f64().unwrap() > 0.0);
}

#[test]
fn too_few_points_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("two.csv");
    write_cloud(&cloud, &[[0.0, 0.0], [1.0, 0.0]]);
    let o = rothshape(&fit_args("fit-points", path_str(&cloud), path_str(dir.path())));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 3"));
}

#[test]
fn constant_image_reports_empty_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("flat.pgm");
    rothshape::image_ingest::GrayImage::from_fn(32, 32, |_, _| 90.0).unwrap().write_pgm(&img).unwrap();
    let o = rothshape(&fit_args("fit-image", path_str(&img), path_str(&dir.path().join("o"))));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty point cloud"), "{}", stderr(&o));
}

#[test]
fn invalid_pgm_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("junk.pgm");
    std::fs::write(&img, b"not an image").unwrap();
    let o = rothshape(&fit_args("fit-image", path_str(&img), path_str(&dir.path().join("o"))));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn image_fit_reports_threshold_sweep_and_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("disk.pgm");
    disk_image(64, [31.5, 31.5], 15.0).box_blur().write_pgm(&img).unwrap();
    let out = dir.path().join("o");
    let o = rothshape(&fit_args("fit-image", path_str(&img), path_str(&out)));
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&out.join("summary.json"));
    let counts: Vec<u64> = summary["threshold_sweep"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["points"].as_u64().unwrap())
        .collect();
    assert_eq!(counts.len(), 3);
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    assert_eq!(summary["orientations"], true);
    let svg = std::fs::read_to_string(out.join("overlay.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let dots = doc.descendants().filter(|n| n.has_tag_name("circle")).count();
    assert!(dots >= summary["threshold"]["points"].as_u64().unwrap() as usize);
}

#[test]
fn population_needs_two_clouds() {
    let dir = tempfile::tempdir().unwrap();
    write_cloud(&dir.path().join("a.csv"), &circle_points([0.0, 0.0], 1.0, 40));
    let o = rothshape(&fit_args("fit-population", path_str(dir.path()), path_str(&dir.path().join("o"))));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 2"));
}

#[test]
fn identical_pair_matches_single_fit() {
    let dir = tempfile::tempdir().unwrap();
    let clouds = dir.path().join("clouds");
    std::fs::create_dir(&clouds).unwrap();
    let pts: Vec<_> = circle_points([0.0, 0.0], 1.0, 80)
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let r = 1.0 + 0.15 * (3.0 * i as f64 * 2.0 * std::f64::consts::PI / 80.0).cos();
            [r * p[0], r * p[1]]
        })
        .collect();
    write_cloud(&clouds.join("a.csv"), &pts);
    write_cloud(&clouds.join("b.csv"), &pts);
    write_cloud(&dir.path().join("single.csv"), &pts);
    let pop = dir.path().join("pop");
    let o = rothshape(&fit_args("fit-population", path_str(&clouds), path_str(&pop)));
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&pop.join("summary.json"));
    assert_eq!(summary["K"], 2);
    assert_eq!(summary["point_counts"], serde_json::json!([80, 80]));
    let single = dir.path().join("single");
    let o = rothshape(&fit_args("fit-points", path_str(&dir.path().join("single.csv")), path_str(&single)));
    assert!(o.status.success());
    let central: ControlPolygon = serde_json::from_value(read_json(&pop.join("central.json"))).unwrap();
    let fit: ControlPolygon = serde_json::from_value(read_json(&single.join("fit.json"))).unwrap();
    // with two shapes and the default hyperprior the mean deformations keep
    // a visible pull toward their prior means (about a ninth of the way,
    // plus averaging over the parameter origin), so the tolerance is set
    // against the size of the lobes themselves
    let d = curve_procrustes(&central, &fit, 256, Alignment::Similarity).unwrap();
    let circle = ControlPolygon::from_points(&circle_points([0.0, 0.0], 2.0, 3)).unwrap();
    let lobes = curve_procrustes(&circle, &fit, 256, Alignment::Similarity).unwrap();
    assert!(d < 0.35 * lobes, "procrustes {d}, lobes {lobes}");
    for k in 0..2 {
        assert!(pop.join(format!("shape_{k:03}.json")).exists());
    }
}

#[test]
fn render_vertex_count_and_circle_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let poly = ControlPolygon::from_points(&circle_points([0.5, -0.2], 4.0, 3)).unwrap();
    let input = dir.path().join("c.json");
    std::fs::write(&input, serde_json::to_string(&poly).unwrap()).unwrap();
    let out = dir.path().join("c4.svg");
    assert!(rothshape(&["render", path_str(&input), "--out", path_str(&out), "--samples", "4"]).status.success());
    assert_eq!(svg_polygon(&std::fs::read_to_string(&out).unwrap()).len(), 4);
    let out = dir.path().join("c512.svg");
    assert!(rothshape(&["render", path_str(&input), "--out", path_str(&out), "--samples", "512"]).status.success());
    let pts = svg_polygon(&std::fs::read_to_string(&out).unwrap());
    assert_eq!(pts.len(), 512);
    let n = pts.len() as f64;
    let c = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let radii: Vec<f64> = pts.iter().map(|p| (p[0] - c[0]).hypot(p[1] - c[1])).collect();
    let mean = radii.iter().sum::<f64>() / n;
    let worst = radii.iter().map(|r| (r - mean).abs()).fold(0.0, f64::max);
    assert!(worst < 0.005 * mean, "{worst} vs {mean}");
}

#[test]
fn render_rejects_bad_json() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.json");
    std::fs::write(&input, "{\"degree\": 1, \"coords\": [1, 2]}").unwrap();
    let o = rothshape(&["render", path_str(&input), "--out", path_str(&dir.path().join("x.svg"))]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&input, "not json").unwrap();
    let o = rothshape(&["render", path_str(&input), "--out", path_str(&dir.path().join("x.svg"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn render_accepts_sampled_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixtures().join("populations/star/shape_000.json");
    let out = dir.path().join("star.svg");
    let o = rothshape(&["render", path_str(&input), "--out", path_str(&out), "--samples", "64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(svg_polygon(&std::fs::read_to_string(&out).unwrap()).len(), 64);
}
