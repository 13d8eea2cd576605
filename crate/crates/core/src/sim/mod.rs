//! Synthetic scenes, a ray-cast LiDAR simulator that knows the true class of
//! every return, log readers/writers and detection scoring.

mod eval;
mod io;
mod scene;

pub use eval::{eval_detection, DetectionCounts};
pub use io::{
    decode_frame_bin, encode_frame_bin, frame_files, parse_poses, read_frame_bin, read_labels, read_poses,
    write_frame_bin, write_labels, write_poses, FrameDir,
};
pub use scene::{hdl64_elevations_deg, Actor, CellClass, LidarModel, Primitive, RampAxis, Route, SceneSpec, Solid};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{azimuth_of, Point3, PointCloudFrame, Pose};
use crate::par::{self, Execution};

/// Per-point truth for one simulated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Class of the surface each point was sampled from, in point order.
    pub labels: Vec<CellClass>,
    pub pose: Pose,
    pub frame_index: usize,
}

const BUILTIN: [(&str, &str); 5] = [
    ("curb-road", include_str!("../../scenes/curb-road.toml")),
    ("overpass", include_str!("../../scenes/overpass.toml")),
    ("garage-2f", include_str!("../../scenes/garage-2f.toml")),
    ("parking-dynamic", include_str!("../../scenes/parking-dynamic.toml")),
    ("urban-street", include_str!("../../scenes/urban-street.toml")),
];

pub fn builtin_scene_names() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

pub fn builtin_scene(name: &str) -> Result<SceneSpec> {
    let (_, text) = BUILTIN.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        Error::Config(format!(
            "unknown scene {name:?}; known: {}",
            builtin_scene_names().join(", ")
        ))
    })?;
    SceneSpec::from_toml(text)
}

fn ray_seed(seed: u64, frame_index: usize, elevation: f64, column: usize) -> u64 {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for v in [frame_index as u64, elevation.to_bits(), column as u64] {
        h = (h ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 29;
    }
    h
}

/// Casts every beam of the scene's LiDAR from `pose`. Returns sensor-frame
/// points (rounded to f32, as a driver would deliver them) with true classes.
pub fn simulate_scan(scene: &SceneSpec, pose: &Pose, frame_index: usize) -> Result<(PointCloudFrame, GroundTruth)> {
    simulate_scan_with(scene, pose, frame_index, Execution::default())
}

pub fn simulate_scan_with(
    scene: &SceneSpec,
    pose: &Pose,
    frame_index: usize,
    execution: Execution,
) -> Result<(PointCloudFrame, GroundTruth)> {
    let lidar = &scene.lidar;
    lidar.validate()?;
    let elevations = lidar.elevations()?;
    let solids = scene.solids_at(frame_index)?;
    let w = lidar.width;
    let o = pose.translation;
    let o = [o.x, o.y, o.z];
    let noise = (lidar.range_noise > 0.0).then(|| Normal::new(0.0, lidar.range_noise).unwrap());

    let rings = par::map_range(execution, elevations.len(), |r| {
        let e = elevations[r];
        let mut pts = Vec::with_capacity(w);
        for c in 0..w {
            let az = (c as f64 + 0.5) * std::f64::consts::TAU / w as f64;
            let ds = nalgebra::Vector3::new(e.cos() * az.cos(), e.cos() * az.sin(), e.sin());
            let dw = pose.rotation * ds;
            let dw = [dw.x, dw.y, dw.z];
            let mut best: Option<(f64, CellClass)> = None;
            for s in &solids {
                if let Some((t, class)) = s.intersect(&o, &dw, lidar.min_range) {
                    if t <= lidar.max_range && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, class));
                    }
                }
            }
            let Some((mut t, class)) = best else { continue };
            if let Some(n) = &noise {
                let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(lidar.seed, frame_index, e, c));
                t = (t + n.sample(&mut rng)).max(lidar.min_range);
            }
            let p = ds * t;
            let p = Point3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64);
            if p.norm() > 0.0 {
                pts.push((p, r as u16, class));
            }
        }
        pts
    });

    let n: usize = rings.iter().map(Vec::len).sum();
    let (mut points, mut ring, mut azimuth, mut labels) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for (p, r, class) in rings.into_iter().flatten() {
        azimuth.push(azimuth_of(&p));
        points.push(p);
        ring.push(r);
        labels.push(class);
    }
    let frame = PointCloudFrame::new(points, ring, azimuth, frame_index as f64 * 0.1, frame_index as u64)?;
    Ok((
        frame,
        GroundTruth {
            labels,
            pose: *pose,
            frame_index,
        },
    ))
}
