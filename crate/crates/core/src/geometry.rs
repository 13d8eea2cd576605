//! Points, poses, sweeps and their spherical range-image view.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn horizontal_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        (self.vector() - other.vector()).norm()
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Point3::new(v.x, v.y, v.z)
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Rigid 6-DoF transform, sensor (or body) frame into world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Pose { translation, rotation }
    }

    /// Builds a pose from a raw quaternion, rejecting anything whose norm is
    /// more than 1e-9 away from one.
    pub fn from_parts(translation: [f64; 3], quat_xyzw: [f64; 4]) -> Result<Self> {
        let [qx, qy, qz, qw] = quat_xyzw;
        let q = Quaternion::new(qw, qx, qy, qz);
        if !translation.iter().chain(quat_xyzw.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose component".into()));
        }
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::MalformedInput(format!("quaternion norm {} is not 1", q.norm())));
        }
        Ok(Pose {
            translation: Vector3::from(translation),
            rotation: UnitQuaternion::new_unchecked(q),
        })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose::new(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    pub fn from_xyz_rpy(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Pose::new(
            Vector3::new(x, y, z),
            UnitQuaternion::from_euler_angles(roll, pitch, yaw),
        )
    }

    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose::from_xyz_rpy(x, y, z, 0.0, 0.0, yaw)
    }

    /// Builds a pose from a row-major 3x4 matrix `[R | t]`.
    ///
    /// Rotations that drift from orthonormal by more than 1e-6 are snapped
    /// back; anything worse than 1e-3 is rejected.
    pub fn from_matrix34(m: &[f64; 12]) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose matrix".into()));
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let drift = (r.transpose() * r - Matrix3::identity()).abs().max();
        if drift > 1e-3 || r.determinant() <= 0.0 {
            return Err(Error::MalformedInput(format!(
                "rotation is not orthonormal (drift {drift:.3e})"
            )));
        }
        let rotation = if drift > 1e-6 {
            UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(&r))
        } else {
            UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r))
        };
        Ok(Pose::new(Vector3::new(m[3], m[7], m[11]), rotation))
    }

    pub fn to_matrix34(&self) -> [f64; 12] {
        let r = self.rotation.to_rotation_matrix();
        let r = r.matrix();
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    /// Quaternion as `[qx, qy, qz, qw]`.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from_vector(&(self.rotation * p.vector() + self.translation))
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(-(inv * self.translation), inv)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.translation + self.translation,
            self.rotation * other.rotation,
        )
    }

    pub fn origin(&self) -> Point3 {
        Point3::from_vector(&self.translation)
    }

    pub fn yaw(&self) -> f64 {
        self.rotation.euler_angles().2
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Angle of the relative rotation between two poses, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// One LiDAR sweep in the sensor frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudFrame {
    pub points: Vec<Point3>,
    pub ring: Vec<u16>,
    pub azimuth: Vec<f64>,
    pub timestamp: f64,
    pub frame_id: u64,
}

impl PointCloudFrame {
    pub fn new(points: Vec<Point3>, ring: Vec<u16>, azimuth: Vec<f64>, timestamp: f64, frame_id: u64) -> Result<Self> {
        if ring.len() != points.len() || azimuth.len() != points.len() {
            return Err(Error::MalformedInput(format!(
                "frame {frame_id}: {} points, {} rings, {} azimuths",
                points.len(),
                ring.len(),
                azimuth.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("point {p:?} in frame {frame_id}")));
        }
        if let Some(a) = azimuth.iter().find(|a| !(0.0..TAU).contains(*a)) {
            return Err(Error::MalformedInput(format!(
                "azimuth {a} outside [0, 2pi) in frame {frame_id}"
            )));
        }
        Ok(PointCloudFrame {
            points,
            ring,
            azimuth,
            timestamp,
            frame_id,
        })
    }

    /// Builds a frame from bare points, inferring ring from the nearest
    /// entry of `elevations` (radians, ascending) and azimuth from atan2.
    /// Points at the sensor origin are discarded.
    pub fn from_points(points: &[Point3], elevations: &[f64], timestamp: f64, frame_id: u64) -> Result<Self> {
        if elevations.is_empty() {
            return Err(Error::Config("empty channel table".into()));
        }
        let mut out = PointCloudFrame {
            timestamp,
            frame_id,
            ..Default::default()
        };
        for p in points {
            if !p.is_finite() || p.norm() == 0.0 {
                continue;
            }
            let elev = p.z.atan2(p.horizontal_norm());
            out.points.push(*p);
            out.ring.push(nearest_channel(elevations, elev) as u16);
            out.azimuth.push(azimuth_of(p));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Azimuth of a sensor-frame point, normalized into [0, 2π).
pub fn azimuth_of(p: &Point3) -> f64 {
    let a = p.y.atan2(p.x);
    let a = if a < 0.0 { a + TAU } else { a };
    // `a + TAU` can round up to exactly TAU for tiny negative angles.
    if a >= TAU {
        0.0
    } else {
        a
    }
}

fn nearest_channel(elevations: &[f64], elev: f64) -> usize {
    let i = elevations.partition_point(|&e| e < elev);
    if i == 0 {
        0
    } else if i == elevations.len() {
        elevations.len() - 1
    } else if (elevations[i] - elev).abs() < (elev - elevations[i - 1]).abs() {
        i
    } else {
        i - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeCell {
    pub range: f64,
    pub point_index: u32,
}

/// H×W spherical grid; row = channel, column = azimuth bin.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    cells: Vec<Option<RangeCell>>,
}

impl RangeImage {
    pub fn get(&self, row: usize, col: usize) -> Option<RangeCell> {
        self.cells[row * self.width + col]
    }

    pub fn filled_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn cells(&self) -> &[Option<RangeCell>] {
        &self.cells
    }
}

pub fn azimuth_column(azimuth: f64, width: usize) -> usize {
    ((azimuth / TAU * width as f64).floor() as usize) % width
}

pub fn build_range_image(frame: &PointCloudFrame, height: usize, width: usize) -> Result<RangeImage> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("range image {height}x{width}")));
    }
    let mut cells: Vec<Option<RangeCell>> = vec![None; height * width];
    for (i, p) in frame.points.iter().enumerate() {
        let row = frame.ring[i] as usize;
        if row >= height {
            return Err(Error::MalformedInput(format!(
                "point {i} has ring {row}, image has {height} rows"
            )));
        }
        let col = azimuth_column(frame.azimuth[i], width);
        let range = p.norm();
        let slot = &mut cells[row * width + col];
        match slot {
            Some(c) if c.range <= range => {}
            _ => {
                *slot = Some(RangeCell {
                    range,
                    point_index: i as u32,
                })
            }
        }
    }
    Ok(RangeImage { height, width, cells })
}

/// A rectangular block of range-image cells; columns wrap modulo the image width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectorWindow {
    pub row_start: usize,
    pub row_extent: usize,
    pub col_start: usize,
    pub col_extent: usize,
}

impl SectorWindow {
    /// Every (row, col) the window covers, in row-major order.
    pub fn cells(&self, width: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row_start..self.row_start + self.row_extent)
            .flat_map(move |r| (0..self.col_extent).map(move |k| (r, (self.col_start + k) % width)))
    }
}

/// Tiles an H×W image with overlapping windows.
///
/// Row windows start at multiples of `row_step`; if the last one would leave
/// rows uncovered a final window flush with the bottom edge is added. Column
/// windows start at multiples of `col_step` and wrap around the seam.
pub fn enumerate_sectors(
    height: usize,
    width: usize,
    win_rows: usize,
    win_cols: usize,
    row_step: usize,
    col_step: usize,
) -> Result<Vec<SectorWindow>> {
    if win_rows == 0 || win_cols == 0 || row_step == 0 || col_step == 0 {
        return Err(Error::Config("sector extents and steps must be >= 1".into()));
    }
    if win_rows > height || win_cols > width {
        return Err(Error::Config(format!(
            "sector {win_rows}x{win_cols} does not fit a {height}x{width} image"
        )));
    }
    let mut row_starts: Vec<usize> = (0..=height - win_rows).step_by(row_step).collect();
    if *row_starts.last().unwrap() + win_rows < height {
        row_starts.push(height - win_rows);
    }
    let n_cols = width.div_ceil(col_step);
    let mut windows = Vec::with_capacity(row_starts.len() * n_cols);
    for &row_start in &row_starts {
        for k in 0..n_cols {
            windows.push(SectorWindow {
                row_start,
                row_extent: win_rows,
                col_start: k * col_step,
                col_extent: win_cols,
            });
        }
    }
    Ok(windows)
}

pub fn transform_points(points: &[Point3], pose: &Pose) -> Vec<Point3> {
    points.iter().map(|p| pose.transform_point(p)).collect()
}
