//! `rothshape` command line: prior draws, fits to point clouds, images and
//! populations, and SVG renders.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use rothshape::curve::{ControlPolygon, Point};
use rothshape::image_ingest::{extract_cloud, gradient_field, GrayImage, OrientedPointCloud};
use rothshape::inference::{
    data_scaled_spec, run_chain, ChainOutput, DefaultScales, GriddySpec, McmcConfig, ObservationSet, PriorConfig,
    ShapeObservations,
};
use rothshape::process::{sample_population, ShapeProcessSpec, ShapeTrajectory};
use rothshape::render::{render_polygon, Scene};
use rothshape::Error;

#[derive(Parser)]
#[command(name = "rothshape", version, about = "Multiscale closed-curve shape models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw shapes from a shape process spec.
    Sample(SampleArgs),
    /// Fit one curve to a point cloud CSV.
    FitPoints(FitPointsArgs),
    /// Extract edge points from a PGM image and fit one curve to them.
    FitImage(FitImageArgs),
    /// Fit a population of curves, one per CSV in a directory.
    FitPopulation(FitPopulationArgs),
    /// Render a control polygon as SVG.
    Render(RenderArgs),
}

#[derive(Args)]
struct SampleArgs {
    /// Shape process spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct McmcArgs {
    /// Spec JSON; without one, a prior scaled to the data is used.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Refinement levels of the data-scaled prior (ignored with --spec).
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 500)]
    burnin: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid size for the curve-parameter updates.
    #[arg(long, default_value_t = 256)]
    grid: usize,
    #[arg(long)]
    threads: Option<usize>,
    /// Leave tangent angles out of the curve-parameter updates.
    #[arg(long)]
    no_orientation_in_t: bool,
    /// Leave out the reparameterization and between-level moves.
    #[arg(long)]
    plain_gibbs: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitPointsArgs {
    /// CSV with `x,y` and optional `theta` / `omega` columns.
    input: PathBuf,
    #[command(flatten)]
    mcmc: McmcArgs,
}

#[derive(Args)]
struct FitImageArgs {
    /// Binary or ASCII PGM.
    input: PathBuf,
    /// Gradient threshold as a fraction of the largest gradient norm.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Box-blur passes before taking gradients.
    #[arg(long, default_value_t = 0)]
    blur: usize,
    #[command(flatten)]
    mcmc: McmcArgs,
}

#[derive(Args)]
struct FitPopulationArgs {
    /// Directory of cloud CSVs, one shape per file, taken in name order.
    input: PathBuf,
    /// Hyperprior covariance of each mean deformation as a multiple of the
    /// level's deformation covariance (ignored when the spec has `mu_hyper`).
    #[arg(long, default_value_t = 4.0)]
    hyper_factor: f64,
    /// Prior scale of the coarsest level relative to the cloud radius; a
    /// large value lets each shape's outline absorb its own pose
    /// (ignored with --spec).
    #[arg(long, default_value_t = 1.0)]
    coarse_scale: f64,
    #[command(flatten)]
    mcmc: McmcArgs,
}

#[derive(Args)]
struct RenderArgs {
    /// Polygon JSON `{"degree", "coords"}` or a trajectory from `sample`.
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    samples: usize,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Numerical(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) | Error::DegenerateTangent { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sample(a) => cmd_sample(a),
        Command::FitPoints(a) => cmd_fit_points(a),
        Command::FitImage(a) => cmd_fit_image(a),
        Command::FitPopulation(a) => cmd_fit_population(a),
        Command::Render(a) => cmd_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}

fn effective_seed(seed: Option<u64>) -> u64 {
    let seed = seed.unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0)
    });
    println!("seed {seed}");
    seed
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> CliResult<()> {
    let spec = ShapeProcessSpec::from_path(&a.spec)?;
    let seed = effective_seed(a.seed);
    fs::create_dir_all(&a.out)?;
    let shapes = sample_population(&spec, a.count, seed)?;
    for (k, traj) in shapes.iter().enumerate() {
        write_json(&a.out.join(format!("shape_{k:03}.json")), traj)?;
        fs::write(a.out.join(format!("shape_{k:03}.svg")), render_polygon(traj.final_polygon(), a.samples))?;
    }
    println!("wrote {} shapes to {}", shapes.len(), a.out.display());
    Ok(())
}

fn mcmc_config(a: &McmcArgs, seed: u64) -> CliResult<McmcConfig> {
    if a.iters == 0 {
        return Err(CliError::Input("--iters must be positive".into()));
    }
    let mut cfg = McmcConfig::new(a.iters, a.burnin, a.thin, seed);
    cfg.griddy = GriddySpec::new(a.grid)?;
    cfg.griddy.orientation = !a.no_orientation_in_t;
    cfg.threads = a.threads;
    if a.plain_gibbs {
        cfg.phase_step = None;
        cfg.resplit_step = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prior_for(a: &McmcArgs, points: &[Point], scales: &DefaultScales) -> CliResult<PriorConfig> {
    match &a.spec {
        Some(path) => Ok(PriorConfig::from_path(path)?),
        None => Ok(PriorConfig::new(data_scaled_spec(points, a.levels, scales)?)),
    }
}

fn read_cloud(path: &Path) -> CliResult<OrientedPointCloud> {
    OrientedPointCloud::read_csv_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn single_observations(cloud: &OrientedPointCloud) -> CliResult<ShapeObservations> {
    if cloud.len() < 3 {
        return Err(CliError::Input(format!("need at least 3 points, got {}", cloud.len())));
    }
    Ok(ShapeObservations::from_cloud(cloud)?)
}

/// Chain, summary, and the posterior-mean curve of every shape.
fn write_fit(out: &Path, chain: &ChainOutput, extra: Value, clouds: &[&[Point]]) -> CliResult<()> {
    fs::create_dir_all(out)?;
    chain.write_jsonl(BufWriter::new(fs::File::create(out.join("chain.jsonl"))?))?;
    let mut summary = serde_json::to_value(chain.summary()?)?;
    if let (Value::Object(map), Value::Object(more)) = (&mut summary, extra) {
        map.insert("seed".into(), json!(chain.seed));
        map.extend(more);
    }
    write_json(&out.join("summary.json"), &summary)?;
    for (k, pts) in clouds.iter().enumerate() {
        let fit = chain.posterior_mean_polygon(k)?;
        let name = if clouds.len() == 1 { "fit".to_string() } else { format!("shape_{k:03}") };
        write_json(&out.join(format!("{name}.json")), &fit)?;
        let svg = Scene::new(512).points(pts).curve(&fit, "#1f4e9a").to_svg();
        fs::write(out.join(format!("{name}.svg")), svg)?;
    }
    Ok(())
}

fn fit_single(cloud: &OrientedPointCloud, a: &McmcArgs, extra: Value) -> CliResult<()> {
    let obs = single_observations(cloud)?;
    let prior = prior_for(a, cloud.points(), &DefaultScales::default())?;
    let seed = effective_seed(a.seed);
    let cfg = mcmc_config(a, seed)?;
    let chain = run_chain(&ObservationSet::single(obs)?, &prior, &cfg)?;
    write_fit(&a.out, &chain, extra, &[cloud.points()])?;
    let s = chain.summary()?;
    println!(
        "fitted {} points; sigma {:.4}; acceptance {:?}; output in {}",
        cloud.len(),
        s.sigma,
        s.acceptance,
        a.out.display()
    );
    Ok(())
}

fn cmd_fit_points(a: FitPointsArgs) -> CliResult<()> {
    let cloud = read_cloud(&a.input)?;
    fit_single(&cloud, &a.mcmc, json!({ "input": a.input.display().to_string() }))
}

fn cmd_fit_image(a: FitImageArgs) -> CliResult<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(CliError::Input(format!("--threshold must lie in (0, 1), got {}", a.threshold)));
    }
    let mut img = GrayImage::read_pgm(&a.input).map_err(|e| CliError::Input(format!("{}: {e}", a.input.display())))?;
    for _ in 0..a.blur {
        img = img.box_blur();
    }
    let field = gradient_field(&img)?;
    let max = field.max_norm();
    if !(max > 0.0) {
        return Err(CliError::Input("empty point cloud: the image has no edges".into()));
    }
    let mut sweep = Vec::new();
    for frac in [0.3, 0.5, 0.7] {
        let n = extract_cloud(&field, frac * max)?.len();
        sweep.push(json!({ "fraction": frac, "threshold": frac * max, "points": n }));
    }
    let cloud = extract_cloud(&field, a.threshold * max)?;
    if cloud.is_empty() {
        return Err(CliError::Input(format!("empty point cloud at threshold {}", a.threshold)));
    }
    fs::create_dir_all(&a.mcmc.out)?;
    cloud.write_csv(BufWriter::new(fs::File::create(a.mcmc.out.join("cloud.csv"))?))?;
    let extra = json!({
        "input": a.input.display().to_string(),
        "image": { "width": img.width(), "height": img.height() },
        "threshold": { "fraction": a.threshold, "value": a.threshold * max, "points": cloud.len() },
        "threshold_sweep": sweep,
    });
    fit_single(&cloud, &a.mcmc, extra)?;
    // the fitted curve over the extracted points, under the name the image
    // workflow documents
    fs::copy(a.mcmc.out.join("fit.svg"), a.mcmc.out.join("overlay.svg"))?;
    Ok(())
}

fn cmd_fit_population(a: FitPopulationArgs) -> CliResult<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(&a.input)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.len() < 2 {
        return Err(CliError::Input(format!(
            "population fit needs at least 2 cloud CSVs, found {} in {}",
            files.len(),
            a.input.display()
        )));
    }
    let clouds = files.iter().map(|f| read_cloud(f)).collect::<CliResult<Vec<_>>>()?;
    let obs = clouds.iter().map(single_observations).collect::<CliResult<Vec<_>>>()?;
    let all: Vec<Point> = clouds.iter().flat_map(|c| c.points().iter().copied()).collect();
    let scales = DefaultScales {
        coarse: a.coarse_scale,
        ..DefaultScales::default()
    };
    let mut prior = prior_for(&a.mcmc, &all, &scales)?;
    if prior.mu_hyper.is_none() {
        if !(a.hyper_factor > 0.0 && a.hyper_factor.is_finite()) {
            return Err(CliError::Input(format!("--hyper-factor must be positive, got {}", a.hyper_factor)));
        }
        prior = prior.with_proportional_hyperprior(a.hyper_factor)?;
    }
    let seed = effective_seed(a.mcmc.seed);
    let cfg = mcmc_config(&a.mcmc, seed)?;
    info!("fitting {} shapes", clouds.len());
    let chain = run_chain(&ObservationSet::new(obs)?, &prior, &cfg)?;
    let counts: Vec<usize> = clouds.iter().map(|c| c.len()).collect();
    let names: Vec<String> = files.iter().map(|f| f.display().to_string()).collect();
    let extra = json!({ "K": clouds.len(), "point_counts": counts, "inputs": names });
    let pts: Vec<&[Point]> = clouds.iter().map(|c| c.points()).collect();
    write_fit(&a.mcmc.out, &chain, extra, &pts)?;
    let central = chain.central_shape()?;
    write_json(&a.mcmc.out.join("central.json"), &central)?;
    fs::write(a.mcmc.out.join("central.svg"), render_polygon(&central, 512))?;
    println!("fitted {} shapes with {:?} points; output in {}", clouds.len(), counts, a.mcmc.out.display());
    Ok(())
}

fn read_polygon(path: &Path) -> CliResult<ControlPolygon> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if value.get("polygons").is_some() {
        let traj: ShapeTrajectory = serde_json::from_value(value)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        return Ok(traj.final_polygon().clone());
    }
    serde_json::from_value(value).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn cmd_render(a: RenderArgs) -> CliResult<()> {
    if a.samples < 3 {
        return Err(CliError::Input(format!("--samples must be at least 3, got {}", a.samples)));
    }
    let poly = read_polygon(&a.input)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, render_polygon(&poly, a.samples))?;
    Ok(())
}
