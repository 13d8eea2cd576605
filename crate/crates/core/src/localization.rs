//! Frame-to-map localization: the frame's obstacles go through the same
//! encode/decode path as the map, then point-to-point ICP aligns them with
//! the map's decoded cloud, seeded by the previous pose.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::codec::{decode_cloud, encode_frame_descriptors, UpdateLut, VoxelBand, DEFAULT_OCCUPIED_THRESHOLD};
use crate::error::{Error, Result};
use crate::fusion::Atlas;
use crate::geometry::{Point3, PointCloudFrame, Pose};
use crate::grid::WorldGrid;
use crate::traversability::{detect_traversable, PointLabel, TraversabilityConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Pairs farther apart than this are ignored.
    pub max_correspondence_distance: f64,
    pub epsilon_translation: f64,
    pub epsilon_rotation: f64,
    /// A result only counts as converged when its RMS residual is at most this.
    pub max_residual: f64,
    /// ...and at least this fraction of source points found a partner.
    pub min_inlier_fraction: f64,
}

impl IcpParams {
    /// Defaults for a map of the given resolution.
    pub fn for_resolution(resolution: f64) -> Self {
        IcpParams {
            max_iterations: 50,
            max_correspondence_distance: 2.0 * resolution,
            epsilon_translation: 1e-4,
            epsilon_rotation: 1e-4,
            max_residual: resolution,
            min_inlier_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub pose: Pose,
    /// RMS distance of matched pairs at the final pose.
    pub translation_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub inlier_fraction: f64,
    /// Truncated mean squared distance at each accepted pose, starting with
    /// the initial one. Non-increasing.
    pub objective_trace: Vec<f64>,
    pub segmentation_ms: f64,
    pub registration_ms: f64,
}

/// A target cloud with its nearest-neighbour index.
pub struct TargetCloud {
    points: Vec<[f64; 3]>,
    tree: ImmutableKdTree<f64, u32, 3, 32>,
}

impl TargetCloud {
    pub fn new(points: &[Point3]) -> Self {
        let points: Vec<[f64; 3]> = points.iter().map(Point3::to_array).collect();
        let tree = ImmutableKdTree::new_from_slice(&points);
        TargetCloud { points, tree }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn nearest(&self, q: &[f64; 3]) -> (f64, &[f64; 3]) {
        let n = self.tree.nearest_one::<SquaredEuclidean>(q);
        (n.distance, &self.points[n.item as usize])
    }
}

pub const MIN_ICP_POINTS: usize = 10;

/// Best rigid motion taking `src` onto `dst` (least squares).
fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Pose::new(cd - rotation * cs, rotation)
}

struct Matching {
    src: Vec<Vector3<f64>>,
    dst: Vec<Vector3<f64>>,
    /// Mean of min(d^2, gate^2) over all source points.
    objective: f64,
    sum_sq: f64,
}

fn match_points(source: &[Point3], target: &TargetCloud, pose: &Pose, gate: f64) -> Matching {
    let gate2 = gate * gate;
    let mut m = Matching {
        src: Vec::new(),
        dst: Vec::new(),
        objective: 0.0,
        sum_sq: 0.0,
    };
    for p in source {
        let w = pose.transform_point(p);
        let (d2, t) = target.nearest(&w.to_array());
        if d2 <= gate2 {
            m.src.push(w.vector());
            m.dst.push(Vector3::from(*t));
            m.objective += d2;
            m.sum_sq += d2;
        } else {
            m.objective += gate2;
        }
    }
    m.objective /= source.len() as f64;
    m
}

/// Point-to-point ICP of `source` onto `target` from `init`.
pub fn icp_register(
    source: &[Point3],
    target: &[Point3],
    init: &Pose,
    params: &IcpParams,
) -> Result<LocalizationResult> {
    if target.len() < MIN_ICP_POINTS {
        return Err(Error::InsufficientPoints {
            needed: MIN_ICP_POINTS,
            got: target.len(),
        });
    }
    icp_register_to(source, &TargetCloud::new(target), init, params)
}

/// As [`icp_register`], against a prebuilt target index.
pub fn icp_register_to(
    source: &[Point3],
    target: &TargetCloud,
    init: &Pose,
    params: &IcpParams,
) -> Result<LocalizationResult> {
    let start = Instant::now();
    for (cloud, n) in [("source", source.len()), ("target", target.len())] {
        if n < MIN_ICP_POINTS {
            log::debug!("{cloud} cloud too small for registration");
            return Err(Error::InsufficientPoints {
                needed: MIN_ICP_POINTS,
                got: n,
            });
        }
    }
    let gate = params.max_correspondence_distance;
    let mut pose = *init;
    let mut m = match_points(source, target, &pose, gate);
    let mut trace = vec![m.objective];
    let mut iterations = 0;
    let mut small_step = false;
    let mut growing = 0;
    let mut last_rms = f64::INFINITY;
    while iterations < params.max_iterations && m.src.len() >= 3 {
        iterations += 1;
        let delta = kabsch(&m.src, &m.dst);
        let candidate = delta.compose(&pose);
        let next = match_points(source, target, &candidate, gate);
        if next.objective > m.objective {
            // The step made things worse: keep the previous pose.
            small_step = true;
            break;
        }
        pose = candidate;
        m = next;
        trace.push(m.objective);
        let rms = if m.src.is_empty() {
            f64::INFINITY
        } else {
            (m.sum_sq / m.src.len() as f64).sqrt()
        };
        growing = if rms > last_rms { growing + 1 } else { 0 };
        last_rms = rms;
        if growing >= 3 {
            break;
        }
        if delta.translation.norm() < params.epsilon_translation && delta.rotation.angle() < params.epsilon_rotation {
            small_step = true;
            break;
        }
    }
    let inlier_fraction = m.src.len() as f64 / source.len() as f64;
    let residual = if m.src.is_empty() {
        f64::INFINITY
    } else {
        (m.sum_sq / m.src.len() as f64).sqrt()
    };
    let converged =
        small_step && growing < 3 && residual <= params.max_residual && inlier_fraction >= params.min_inlier_fraction;
    Ok(LocalizationResult {
        pose,
        translation_residual: residual,
        iterations,
        converged,
        inlier_fraction,
        objective_trace: trace,
        segmentation_ms: 0.0,
        registration_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationConfig {
    pub traversability: TraversabilityConfig,
    /// Map cloud radius around the previous pose, meters.
    pub radius: f64,
    pub occupied_threshold: u8,
    /// Correspondence gates applied in turn; the last one is the fine gate.
    /// Empty means the fine gate of `icp` alone.
    pub coarse_gates: Vec<f64>,
    pub icp: Option<IcpParams>,
    /// Times the frame is re-encoded at the current estimate.
    pub refinement_rounds: usize,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            traversability: TraversabilityConfig::default(),
            radius: 40.0,
            occupied_threshold: DEFAULT_OCCUPIED_THRESHOLD,
            coarse_gates: vec![1.0],
            icp: None,
            refinement_rounds: 3,
        }
    }
}

/// Obstacle points of a frame (sensor frame) within `radius` horizontally.
pub fn segment_obstacles(frame: &PointCloudFrame, config: &TraversabilityConfig, radius: f64) -> Result<Vec<Point3>> {
    let labeled = detect_traversable(frame, config)?;
    Ok(labeled
        .points_with(PointLabel::Obstacle)
        .filter(|p| p.horizontal_norm() <= radius)
        .copied()
        .collect())
}

/// Encodes sensor-frame obstacle points into a frame grid placed at `pose`
/// and decodes it back, returning sensor-frame segment centers.
pub fn encode_decode_cloud(
    points: &[Point3],
    pose: &Pose,
    band: &VoxelBand,
    lut: &UpdateLut,
    threshold: u8,
) -> Result<Vec<Point3>> {
    let world: Vec<Point3> = points.iter().map(|p| pose.transform_point(p)).collect();
    let mut cells: Vec<_> = encode_frame_descriptors(band, &pose.origin(), &world, lut)
        .into_iter()
        .collect();
    cells.sort_by_key(|(c, _)| *c);
    let inv = pose.inverse();
    Ok(decode_cloud(cells.iter().map(|(c, d)| (c, d)), band, threshold)
        .iter()
        .map(|p| inv.transform_point(p))
        .collect())
}

/// Segments a frame and runs it through the map's encode/decode path in its
/// own sensor frame (band relative to the sensor).
pub fn prepare_frame_cloud(frame: &PointCloudFrame, atlas: &Atlas, config: &LocalizationConfig) -> Result<Vec<Point3>> {
    if frame.is_empty() {
        return Err(Error::MalformedInput("empty frame".into()));
    }
    let obstacles = segment_obstacles(frame, &config.traversability, config.radius)?;
    let band = VoxelBand::new(
        WorldGrid::new(atlas.resolution(), [0.0, 0.0])?,
        &atlas.config().segments,
        0.0,
    );
    encode_decode_cloud(
        &obstacles,
        &Pose::identity(),
        &band,
        atlas.lut(),
        config.occupied_threshold,
    )
}

/// Fraction of the radius the vehicle may drift before the submap is rebuilt.
const SUBMAP_MARGIN: f64 = 0.25;

/// Tracks a sequence of frames against one map, reusing the decoded map
/// cloud while the vehicle stays near where it was extracted.
pub struct Localizer<'a> {
    atlas: &'a Atlas,
    config: LocalizationConfig,
    params: IcpParams,
    submap: Option<([f64; 2], TargetCloud)>,
}

impl<'a> Localizer<'a> {
    pub fn new(atlas: &'a Atlas, config: LocalizationConfig) -> Self {
        let params = config
            .icp
            .unwrap_or_else(|| IcpParams::for_resolution(atlas.resolution()));
        Localizer {
            atlas,
            config,
            params,
            submap: None,
        }
    }

    fn submap(&mut self, at: &Pose) -> Result<&TargetCloud> {
        let c = [at.translation.x, at.translation.y];
        let stale = match &self.submap {
            Some((center, _)) => (center[0] - c[0]).hypot(center[1] - c[1]) > SUBMAP_MARGIN * self.config.radius,
            None => true,
        };
        if stale {
            // The extra margin keeps every source point covered until the next refresh.
            let r = (1.0 + SUBMAP_MARGIN) * self.config.radius;
            let cloud = self
                .atlas
                .decode_obstacles_within(c[0], c[1], r, self.config.occupied_threshold);
            self.submap = Some((c, TargetCloud::new(&cloud)));
        }
        Ok(&self.submap.as_ref().unwrap().1)
    }

    pub fn localize(&mut self, frame: &PointCloudFrame, prev_pose: &Pose) -> Result<LocalizationResult> {
        let t0 = Instant::now();
        if frame.is_empty() {
            return Err(Error::Unlocalizable("empty frame".into()));
        }
        let obstacles = segment_obstacles(frame, &self.config.traversability, self.config.radius)?;
        let segmentation_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let band = self.atlas.band();
        let lut = self.atlas.lut().clone();
        let threshold = self.config.occupied_threshold;
        let params = self.params;
        let mut gates = self.config.coarse_gates.clone();
        gates.push(params.max_correspondence_distance);
        let rounds = self.config.refinement_rounds.max(1);
        let target = self.submap(prev_pose)?;
        if target.len() < MIN_ICP_POINTS {
            return Err(Error::Unlocalizable(format!(
                "map holds {} obstacle points near ({:.1}, {:.1})",
                target.len(),
                prev_pose.translation.x,
                prev_pose.translation.y
            )));
        }

        let mut estimate = *prev_pose;
        let mut result = None;
        let mut trace = Vec::new();
        let mut iterations = 0;
        for round in 0..rounds {
            let source = encode_decode_cloud(&obstacles, &estimate, &band, &lut, threshold)?;
            if source.len() < MIN_ICP_POINTS {
                return Err(Error::Unlocalizable(format!(
                    "frame decodes to {} obstacle points",
                    source.len()
                )));
            }
            let round_start = estimate;
            let stages: &[f64] = if round == 0 { &gates } else { &gates[gates.len() - 1..] };
            for &gate in stages {
                let p = IcpParams {
                    max_correspondence_distance: gate,
                    ..params
                };
                let r = icp_register_to(&source, target, &estimate, &p)?;
                estimate = r.pose;
                iterations += r.iterations;
                trace.extend_from_slice(&r.objective_trace);
                result = Some(r);
            }
            let moved = estimate.translation_distance(&round_start);
            if moved < params.epsilon_translation && estimate.rotation_angle_to(&round_start) < params.epsilon_rotation
            {
                break;
            }
        }
        let mut r = result.unwrap();
        r.iterations = iterations;
        r.objective_trace = trace;
        r.segmentation_ms = segmentation_ms;
        r.registration_ms = t1.elapsed().as_secs_f64() * 1e3;
        Ok(r)
    }
}

/// One-shot localization of a frame against a map.
pub fn localize_frame(
    atlas: &Atlas,
    frame: &PointCloudFrame,
    prev_pose: &Pose,
    config: &LocalizationConfig,
) -> Result<LocalizationResult> {
    Localizer::new(atlas, config.clone()).localize(frame, prev_pose)
}

/// "frame_id tx ty tz qx qy qz qw residual converged"
pub fn trajectory_line(frame_id: u64, r: &LocalizationResult) -> String {
    let t = r.pose.translation;
    let q = r.pose.quaternion_xyzw();
    format!(
        "{frame_id} {} {} {} {} {} {} {} {} {}",
        t.x, t.y, t.z, q[0], q[1], q[2], q[3], r.translation_residual, r.converged as u8
    )
}

pub fn write_trajectory(path: &Path, rows: &[(u64, LocalizationResult)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (id, r) in rows {
        writeln!(f, "{}", trajectory_line(*id, r)).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
