//! `road-atlas`: build, localize in, plan over and inspect road atlases.
//!
//! Exit codes: 0 success, 2 usage, configuration or parse error, 3 no path.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use road_atlas::codec::DEFAULT_OCCUPIED_THRESHOLD;
use road_atlas::fusion::Atlas;
use road_atlas::localization::{write_trajectory, LocalizationConfig, LocalizationResult, Localizer};
use road_atlas::pipeline::{MapBuilder, PipelineConfig};
use road_atlas::planner::{astar, build_nav_graph, is_free, validate_path, write_waypoints};
use road_atlas::sim::{self, FrameDir, LidarModel, SceneSpec};
use road_atlas::store::{load_atlas, save_atlas, stats};
use road_atlas::traversability::TraversabilityConfig;
use road_atlas::{Point3, PointCloudFrame, Pose};

#[derive(Parser)]
#[command(
    name = "road-atlas",
    version,
    about = "Sparse multi-layer road maps from posed LiDAR scans"
)]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true, env = "ROAD_ATLAS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate every frame of a log into a map file.
    Build(BuildArgs),
    /// Track a log against a map and write the estimated trajectory.
    Localize(LocalizeArgs),
    /// Shortest traversable route between two points of a map.
    Plan(PlanArgs),
    /// Simulate a built-in or TOML scene into a log directory.
    Synth(SynthArgs),
    /// Print size and layer statistics of a map.
    Stats(StatsArgs),
    /// Write decoded obstacles and traversable cells as an ASCII point file.
    Export(ExportArgs),
}

/// Where frames come from and which beam layout assigns their rings.
#[derive(Args)]
struct LogArgs {
    /// Log directory: either holds `velodyne/*.bin` or the `.bin` files themselves.
    #[arg(long)]
    frames: PathBuf,
    /// Beam layout TOML (default: `lidar.toml` in the log, else HDL-64).
    #[arg(long)]
    lidar: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    log: LogArgs,
    /// One 12-number pose line per frame (default: `poses.txt` in the log).
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Cell size, meters.
    #[arg(long, default_value_t = 0.1)]
    resolution: f64,
    /// Keyframe radius, meters.
    #[arg(long, default_value_t = 20.0)]
    radius: f64,
    /// Vertical segments per cell.
    #[arg(long, default_value_t = 8)]
    segments: u8,
    /// Bottom of the vertical band relative to the datum, meters.
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    z_low: f64,
    /// Top of the vertical band relative to the datum, meters.
    #[arg(long, default_value_t = 7.0, allow_hyphen_values = true)]
    z_high: f64,
    /// Band datum altitude (default: first sensor height, rounded to 1/8 m).
    #[arg(long, allow_hyphen_values = true)]
    datum: Option<f64>,
    /// Overlap rate above which two surfaces merge.
    #[arg(long, default_value_t = 0.6)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.7)]
    p_hit: f64,
    #[arg(long, default_value_t = 0.4)]
    p_miss: f64,
    #[command(flatten)]
    detection: DetectionArgs,
}

#[derive(Args)]
struct DetectionArgs {
    /// RANSAC inlier distance, meters.
    #[arg(long, default_value_t = 0.05)]
    ransac_threshold: f64,
    /// Steepest ground plane, radians from vertical.
    #[arg(long, default_value_t = 0.4)]
    max_plane_angle: f64,
    /// Fine window rows (ring count).
    #[arg(long)]
    sector_rows: Option<usize>,
    /// Fine window columns.
    #[arg(long)]
    sector_cols: Option<usize>,
    /// Fine window column step.
    #[arg(long)]
    sector_steps: Option<usize>,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
}

impl DetectionArgs {
    fn apply(&self, c: &mut TraversabilityConfig) {
        c.inlier_threshold = self.ransac_threshold;
        c.max_plane_angle = self.max_plane_angle;
        c.seed = self.seed;
        if let Some(r) = self.sector_rows {
            c.fine.rows = r;
        }
        if let Some(w) = self.sector_cols {
            c.fine.cols = w;
        }
        if let Some(s) = self.sector_steps {
            c.fine.col_step = s;
        }
    }
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    map: PathBuf,
    #[command(flatten)]
    log: LogArgs,
    /// Pose of the first frame, "x y z qx qy qz qw".
    #[arg(long, allow_hyphen_values = true)]
    init: String,
    #[arg(long)]
    out: PathBuf,
    /// True poses, for an RMSE report.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Map cloud radius, meters.
    #[arg(long, default_value_t = 40.0)]
    radius: f64,
    /// Lowest code decoded as an obstacle.
    #[arg(long, default_value_t = DEFAULT_OCCUPIED_THRESHOLD)]
    threshold: u8,
    #[command(flatten)]
    detection: DetectionArgs,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    map: PathBuf,
    /// "x y z"
    #[arg(long, allow_hyphen_values = true)]
    start: String,
    /// "x y z"
    #[arg(long, allow_hyphen_values = true)]
    goal: String,
    #[arg(long)]
    out: PathBuf,
    /// Largest height change between neighbouring cells, meters.
    #[arg(long, default_value_t = 0.3)]
    max_step: f64,
    /// Largest altitude gap when snapping start and goal to a layer, meters.
    #[arg(long, default_value_t = 1.0)]
    snap_dz: f64,
    /// Horizontal search radius when snapping, meters.
    #[arg(long, default_value_t = 0.5)]
    snap_radius: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// Built-in scene name or path to a scene TOML.
    #[arg(long)]
    scene: String,
    /// Sensor poses, one 12-number line each (default: the scene's route).
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Keep only the first N poses.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    map: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pcd,
    Ply,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long, value_enum)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
    /// Lowest code decoded as an obstacle.
    #[arg(long, default_value_t = DEFAULT_OCCUPIED_THRESHOLD)]
    threshold: u8,
}

/// Marks a planning query with no connecting route.
#[derive(Debug)]
struct NoPath;

impl std::fmt::Display for NoPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("start and goal are not connected")
    }
}

impl std::error::Error for NoPath {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<NoPath>() => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    set_threads(cli.threads)?;
    match cli.command {
        Command::Build(a) => build(a),
        Command::Localize(a) => localize(a),
        Command::Plan(a) => plan(a),
        Command::Synth(a) => synth(a),
        Command::Stats(a) => {
            print!("{}", stats(&load_atlas(&a.map)?));
            println!();
            Ok(())
        }
        Command::Export(a) => export(a),
    }
}

#[cfg(feature = "parallel")]
fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn set_threads(threads: Option<usize>) -> Result<()> {
    if threads == Some(0) {
        bail!("--threads must be positive");
    }
    Ok(())
}

fn parse_floats<const N: usize>(text: &str, what: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()
        .with_context(|| format!("{what}: {text:?}"))?;
    v.try_into()
        .map_err(|v: Vec<f64>| anyhow!("{what} needs {N} numbers, got {}", v.len()))
}

struct Log {
    dir: FrameDir,
    files: Vec<(u64, PathBuf)>,
    lidar: LidarModel,
    elevations: Vec<f64>,
}

impl Log {
    fn open(args: &LogArgs) -> Result<Self> {
        let dir = FrameDir::new(&args.frames);
        let velodyne = if dir.velodyne().is_dir() {
            dir.velodyne()
        } else {
            args.frames.clone()
        };
        let files = sim::frame_files(&velodyne)?;
        if files.is_empty() {
            bail!("no numbered .bin frames in {}", velodyne.display());
        }
        let lidar_path = args
            .lidar
            .clone()
            .or_else(|| dir.lidar().is_file().then(|| dir.lidar()));
        let lidar = match lidar_path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| p.display().to_string())?;
                LidarModel::from_toml(&text)?
            }
            None => LidarModel {
                preset: Some("hdl64".into()),
                ..LidarModel::default()
            },
        };
        let elevations = lidar.elevations()?;
        Ok(Log {
            dir,
            files,
            lidar,
            elevations,
        })
    }

    fn channels(&self) -> usize {
        self.elevations.len()
    }

    /// Frames are stamped at 10 Hz by id.
    fn read(&self, i: usize) -> Result<PointCloudFrame> {
        let (id, path) = &self.files[i];
        let bytes = std::fs::read(path).with_context(|| path.display().to_string())?;
        let (frame, dropped) = sim::decode_frame_bin(&bytes, &self.elevations, *id, *id as f64 * 0.1)?;
        if dropped > 0 {
            warn!("frame {id}: dropped {dropped} non-finite points");
        }
        Ok(frame)
    }
}

fn build(a: BuildArgs) -> Result<()> {
    let log = Log::open(&a.log)?;
    let poses_path = a.poses.clone().unwrap_or_else(|| log.dir.poses());
    let poses = sim::read_poses(&poses_path)?;
    if poses.len() != log.files.len() {
        bail!(
            "{} frames but {} poses in {}",
            log.files.len(),
            poses.len(),
            poses_path.display()
        );
    }
    let mut config = PipelineConfig::new(log.channels(), log.lidar.width, a.resolution, a.radius);
    config.vertical_datum = a.datum;
    config.atlas.segments.n_segments = a.segments;
    config.atlas.segments.z_low = a.z_low;
    config.atlas.segments.z_high = a.z_high;
    config.atlas.fusion.epsilon = a.epsilon;
    config.atlas.p_hit = a.p_hit;
    config.atlas.p_miss = a.p_miss;
    a.detection.apply(&mut config.traversability);
    let mut builder = MapBuilder::new(config)?;
    let start = Instant::now();
    for (i, pose) in poses.iter().enumerate() {
        let frame = log.read(i)?;
        let r = builder.add_frame(&frame, pose)?;
        println!(
            "frame {} points {} ground {} obstacle {} detect_ms {:.1} local_ms {:.1} fuse_ms {:.1} | {}",
            log.files[i].0,
            frame.len(),
            r.ground_points,
            r.obstacle_points,
            r.detection_ms,
            r.local_map_ms,
            r.fusion_ms,
            r.summary
        );
    }
    let atlas = builder.into_atlas()?;
    let bytes = save_atlas(&atlas, &a.out)?;
    info!(
        "{} keyframes in {:.1} s, wrote {} bytes to {}",
        poses.len(),
        start.elapsed().as_secs_f64(),
        bytes,
        a.out.display()
    );
    println!("{}", stats(&atlas));
    Ok(())
}

fn localize(a: LocalizeArgs) -> Result<()> {
    let atlas = load_atlas(&a.map)?;
    let log = Log::open(&a.log)?;
    let [x, y, z, qx, qy, qz, qw] = parse_floats::<7>(&a.init, "--init")?;
    let init = Pose::from_parts([x, y, z], [qx, qy, qz, qw])?;
    let truth = a.truth.as_deref().map(sim::read_poses).transpose()?;
    if let Some(t) = &truth {
        if t.len() != log.files.len() {
            bail!("{} frames but {} truth poses", log.files.len(), t.len());
        }
    }
    let mut traversability = TraversabilityConfig::for_image(log.channels(), log.lidar.width);
    a.detection.apply(&mut traversability);
    let config = LocalizationConfig {
        traversability,
        radius: a.radius,
        occupied_threshold: a.threshold,
        ..LocalizationConfig::default()
    };
    let mut localizer = Localizer::new(&atlas, config);
    // Constant-velocity prediction: the last estimated motion is applied again.
    let (mut last, mut motion): (Option<Pose>, Pose) = (None, Pose::identity());
    let mut rows: Vec<(u64, LocalizationResult)> = Vec::with_capacity(log.files.len());
    let (mut sq_t, mut sq_r, mut lost) = (0.0, 0.0, 0);
    for i in 0..log.files.len() {
        let id = log.files[i].0;
        let frame = log.read(i)?;
        let t0 = Instant::now();
        let guess = last.map_or(init, |l| l.compose(&motion));
        let r = match localizer.localize(&frame, &guess) {
            Ok(r) => r,
            Err(e) => {
                warn!("frame {id}: {e}");
                lost += 1;
                LocalizationResult {
                    pose: guess,
                    translation_residual: f64::NAN,
                    iterations: 0,
                    converged: false,
                    inlier_fraction: 0.0,
                    objective_trace: Vec::new(),
                    segmentation_ms: 0.0,
                    registration_ms: 0.0,
                }
            }
        };
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        let mut line = format!(
            "frame {id} ms {ms:.1} iterations {} residual {:.4} converged {}",
            r.iterations, r.translation_residual, r.converged
        );
        if let Some(t) = &truth {
            let (dt, dr) = (r.pose.translation_distance(&t[i]), r.pose.rotation_angle_to(&t[i]));
            sq_t += dt * dt;
            sq_r += dr * dr;
            line.push_str(&format!(" error_m {dt:.3} error_deg {:.3}", dr.to_degrees()));
        }
        println!("{line}");
        if let (Some(l), true) = (last, r.converged) {
            motion = l.inverse().compose(&r.pose);
        }
        last = Some(r.pose);
        rows.push((id, r));
    }
    write_trajectory(&a.out, &rows)?;
    let n = rows.len() as f64;
    println!("frames {} unlocalized {lost}", rows.len());
    if truth.is_some() {
        println!(
            "translation_rmse_m {:.4} rotation_rmse_deg {:.4}",
            (sq_t / n).sqrt(),
            (sq_r / n).sqrt().to_degrees()
        );
    }
    Ok(())
}

fn plan(a: PlanArgs) -> Result<()> {
    let atlas = load_atlas(&a.map)?;
    let graph = build_nav_graph(&atlas, a.max_step)?;
    let snap = |text: &str, what: &str| -> Result<_> {
        let [x, y, z] = parse_floats::<3>(text, what)?;
        graph
            .snap_within(x, y, z, a.snap_dz, a.snap_radius)
            .ok_or_else(|| anyhow!("{what} ({x}, {y}, {z}) is not on a traversable layer"))
    };
    let (start, goal) = (snap(&a.start, "--start")?, snap(&a.goal, "--goal")?);
    let t0 = Instant::now();
    let Some(path) = astar(&graph, start, goal)? else {
        return Err(NoPath.into());
    };
    validate_path(&graph, &path)?;
    write_waypoints(&a.out, &graph, &path)?;
    println!(
        "waypoints {} cost_m {:.3} ms {:.1}",
        path.nodes.len(),
        path.cost,
        t0.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn load_scene(name: &str) -> Result<SceneSpec> {
    let path = Path::new(name);
    if path.extension().is_some_and(|e| e == "toml") {
        let text = std::fs::read_to_string(path).with_context(|| name.to_string())?;
        return Ok(SceneSpec::from_toml(&text)?);
    }
    Ok(sim::builtin_scene(name)?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let mut poses = match &a.trajectory {
        Some(p) => sim::read_poses(p)?,
        None => scene.route_poses()?,
    };
    if let Some(n) = a.frames {
        poses.truncate(n);
    }
    if poses.is_empty() {
        bail!("no poses to simulate");
    }
    let dir = FrameDir::new(&a.out);
    dir.create()?;
    let lidar_path = dir.lidar();
    std::fs::write(&lidar_path, scene.lidar.to_toml()?).with_context(|| lidar_path.display().to_string())?;
    sim::write_poses(&dir.poses(), &poses)?;
    for (i, pose) in poses.iter().enumerate() {
        let (frame, truth) = sim::simulate_scan(&scene, pose, i)?;
        sim::write_frame_bin(&dir.frame(i as u64), &frame)?;
        sim::write_labels(&dir.label(i as u64), &truth.labels)?;
    }
    println!("wrote {} frames to {}", poses.len(), a.out.display());
    Ok(())
}

/// Obstacle points (label 0) then traversable layer centers (label 1).
fn export_points(atlas: &Atlas, threshold: u8) -> Vec<(Point3, u8)> {
    let mut out: Vec<(Point3, u8)> = atlas.decode_obstacles(threshold).into_iter().map(|p| (p, 0)).collect();
    let mut cells: Vec<_> = atlas.columns().iter().collect();
    cells.sort_unstable_by_key(|(c, _)| **c);
    for (cell, col) in cells {
        let [x, y] = atlas.grid().cell_center(*cell);
        out.extend(
            col.layers
                .iter()
                .filter(|l| is_free(l))
                .map(|l| (Point3::new(x, y, l.mu), 1)),
        );
    }
    out
}

fn export(a: ExportArgs) -> Result<()> {
    let atlas = load_atlas(&a.map)?;
    let points = export_points(&atlas, a.threshold);
    let mut text = String::new();
    match a.format {
        Format::Pcd => {
            text.push_str("# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z label\n");
            text.push_str("SIZE 4 4 4 1\nTYPE F F F U\nCOUNT 1 1 1 1\n");
            text.push_str(&format!("WIDTH {}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\n", points.len()));
            text.push_str(&format!("POINTS {}\nDATA ascii\n", points.len()));
        }
        Format::Ply => {
            text.push_str("ply\nformat ascii 1.0\n");
            text.push_str(&format!("element vertex {}\n", points.len()));
            text.push_str("property float x\nproperty float y\nproperty float z\nproperty uchar label\nend_header\n");
        }
    }
    for (p, l) in &points {
        text.push_str(&format!("{} {} {} {l}\n", p.x as f32, p.y as f32, p.z as f32));
    }
    std::fs::write(&a.out, text).with_context(|| a.out.display().to_string())?;
    println!("wrote {} points to {}", points.len(), a.out.display());
    Ok(())
}
