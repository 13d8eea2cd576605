//! Ground/obstacle labelling by RANSAC plane fits over range-image sectors.
//!
//! The range image is tiled with overlapping windows: wide coarse windows
//! catch large flat areas, thin fine windows isolate the ring-to-ring steps
//! that curbs produce. A window's plane is accepted when its inliers cover at
//! least half of the window's filled cells and the plane is not too steep.
//! Every point within the inlier band of any accepted plane (restricted to
//! that window's cells) is ground; everything else is an obstacle.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{azimuth_column, build_range_image, enumerate_sectors, Point3, PointCloudFrame, SectorWindow};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneModel {
    /// Unit normal, oriented with nonnegative z.
    pub normal: [f64; 3],
    pub offset: f64,
    pub inlier_indices: Vec<usize>,
}

impl PlaneModel {
    pub fn distance(&self, p: &Point3) -> f64 {
        (self.normal[0] * p.x + self.normal[1] * p.y + self.normal[2] * p.z - self.offset).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLabel {
    Ground,
    Obstacle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame: PointCloudFrame,
    pub labels: Vec<PointLabel>,
}

impl LabeledFrame {
    pub fn ground_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == PointLabel::Ground).count()
    }

    pub fn obstacle_count(&self) -> usize {
        self.labels.len() - self.ground_count()
    }

    pub fn points_with(&self, label: PointLabel) -> impl Iterator<Item = &Point3> {
        self.frame
            .points
            .iter()
            .zip(&self.labels)
            .filter(move |(_, l)| **l == label)
            .map(|(p, _)| p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectorShape {
    pub rows: usize,
    pub cols: usize,
    pub row_step: usize,
    pub col_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraversabilityConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Coarse pass; `None` runs the fine pass alone.
    pub coarse: Option<SectorShape>,
    pub fine: SectorShape,
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    /// Steepest accepted plane, radians from vertical normal.
    pub max_plane_angle: f64,
    pub min_filled_cells: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TraversabilityConfig {
    fn default() -> Self {
        TraversabilityConfig {
            image_height: 16,
            image_width: 1800,
            coarse: Some(SectorShape {
                rows: 16,
                cols: 50,
                row_step: 16,
                col_step: 25,
            }),
            fine: SectorShape {
                rows: 3,
                cols: 50,
                row_step: 1,
                col_step: 25,
            },
            inlier_threshold: 0.05,
            max_iterations: 200,
            max_plane_angle: 0.4,
            min_filled_cells: 10,
            seed: 0x5eed,
            execution: Execution::default(),
        }
    }
}

impl TraversabilityConfig {
    /// Same sectorization scaled to a different image size; window rows are
    /// capped at the image height.
    pub fn for_image(height: usize, width: usize) -> Self {
        let mut c = TraversabilityConfig {
            image_height: height,
            image_width: width,
            ..Default::default()
        };
        if let Some(coarse) = c.coarse.as_mut() {
            coarse.rows = coarse.rows.min(height);
            coarse.row_step = coarse.row_step.min(height);
            coarse.cols = coarse.cols.min(width);
        }
        c.fine.rows = c.fine.rows.min(height);
        c.fine.cols = c.fine.cols.min(width);
        c
    }

    fn windows(&self) -> Result<Vec<SectorWindow>> {
        let (h, w) = (self.image_height, self.image_width);
        let mut out = Vec::new();
        if let Some(s) = self.coarse {
            out.extend(enumerate_sectors(h, w, s.rows, s.cols, s.row_step, s.col_step)?);
        }
        let s = self.fine;
        out.extend(enumerate_sectors(h, w, s.rows, s.cols, s.row_step, s.col_step)?);
        Ok(out)
    }
}

fn plane_through(a: &Point3, b: &Point3, c: &Point3) -> Option<([f64; 3], f64)> {
    let u = b.vector() - a.vector();
    let v = c.vector() - a.vector();
    let n = u.cross(&v);
    let len = n.norm();
    // Relative collinearity test so scale does not matter.
    if len <= 1e-12 * u.norm() * v.norm() || len == 0.0 {
        return None;
    }
    let mut n = n / len;
    if n.z < 0.0 {
        n = -n;
    }
    Some(([n.x, n.y, n.z], n.dot(&a.vector())))
}

/// Best plane over `max_iterations` random triples, by inlier count.
///
/// Sampling stops early once a plane explains every point. Returns `None`
/// for fewer than three points or when every sampled triple is collinear.
pub fn fit_plane_ransac<R: Rng + ?Sized>(
    points: &[Point3],
    inlier_threshold: f64,
    max_iterations: usize,
    rng: &mut R,
) -> Option<PlaneModel> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let mut best: Option<([f64; 3], f64, usize)> = None;
    for _ in 0..max_iterations {
        let idx = sample(rng, n, 3);
        let Some((normal, offset)) = plane_through(&points[idx.index(0)], &points[idx.index(1)], &points[idx.index(2)])
        else {
            continue;
        };
        let count = points
            .iter()
            .filter(|p| (normal[0] * p.x + normal[1] * p.y + normal[2] * p.z - offset).abs() <= inlier_threshold)
            .count();
        if best.is_none_or(|b| count > b.2) {
            best = Some((normal, offset, count));
            if count == n {
                break;
            }
        }
    }
    let (normal, offset, _) = best?;
    let mut plane = PlaneModel {
        normal,
        offset,
        inlier_indices: Vec::new(),
    };
    plane.inlier_indices = (0..n)
        .filter(|&i| plane.distance(&points[i]) <= inlier_threshold)
        .collect();
    Some(plane)
}

/// True when the plane is flatter than `max_angle` from horizontal.
pub fn check_normal(plane: &PlaneModel, max_angle: f64) -> bool {
    plane.normal[2].abs().min(1.0).acos() < max_angle
}

/// A plane accepted for one sector, with the frame points it claimed.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedSector {
    pub window: SectorWindow,
    pub plane: PlaneModel,
    pub claimed: Vec<u32>,
}

/// Frame point indices grouped by range-image cell (CSR layout).
struct CellMembers {
    offsets: Vec<u32>,
    members: Vec<u32>,
}

impl CellMembers {
    fn build(frame: &PointCloudFrame, height: usize, width: usize) -> Self {
        let cell_of = |i: usize| frame.ring[i] as usize * width + azimuth_column(frame.azimuth[i], width);
        let mut offsets = vec![0u32; height * width + 1];
        for i in 0..frame.len() {
            offsets[cell_of(i) + 1] += 1;
        }
        for k in 1..offsets.len() {
            offsets[k] += offsets[k - 1];
        }
        let mut fill = offsets.clone();
        let mut members = vec![0u32; frame.len()];
        for i in 0..frame.len() {
            let c = cell_of(i);
            members[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        CellMembers { offsets, members }
    }

    fn of(&self, cell: usize) -> &[u32] {
        &self.members[self.offsets[cell] as usize..self.offsets[cell + 1] as usize]
    }
}

fn window_seed(base: u64, window: usize) -> u64 {
    base ^ (window as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn detect_traversable(frame: &PointCloudFrame, config: &TraversabilityConfig) -> Result<LabeledFrame> {
    Ok(detect_traversable_detailed(frame, config)?.0)
}

/// Like [`detect_traversable`], also returning every accepted sector plane.
pub fn detect_traversable_detailed(
    frame: &PointCloudFrame,
    config: &TraversabilityConfig,
) -> Result<(LabeledFrame, Vec<AcceptedSector>)> {
    let (h, w) = (config.image_height, config.image_width);
    let image = build_range_image(frame, h, w)?;
    if frame.is_empty() {
        return Ok((
            LabeledFrame {
                frame: frame.clone(),
                labels: Vec::new(),
            },
            Vec::new(),
        ));
    }
    let windows = config.windows()?;
    let members = CellMembers::build(frame, h, w);

    let fit_window = |k: usize| -> Option<AcceptedSector> {
        let win = windows[k];
        let cells: Vec<usize> = win.cells(w).map(|(r, c)| r * w + c).collect();
        let retained: Vec<Point3> = cells
            .iter()
            .filter_map(|&c| image.cells()[c])
            .map(|rc| frame.points[rc.point_index as usize])
            .collect();
        if retained.len() < config.min_filled_cells.max(3) {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(window_seed(config.seed, k));
        let plane = fit_plane_ransac(&retained, config.inlier_threshold, config.max_iterations, &mut rng)?;
        if 2 * plane.inlier_indices.len() < retained.len() || !check_normal(&plane, config.max_plane_angle) {
            return None;
        }
        let claimed = cells
            .iter()
            .flat_map(|&c| members.of(c))
            .copied()
            .filter(|&i| plane.distance(&frame.points[i as usize]) <= config.inlier_threshold)
            .collect();
        Some(AcceptedSector {
            window: win,
            plane,
            claimed,
        })
    };

    let accepted: Vec<AcceptedSector> = par::map_range(config.execution, windows.len(), fit_window)
        .into_iter()
        .flatten()
        .collect();

    let mut labels = vec![PointLabel::Obstacle; frame.len()];
    for s in &accepted {
        for &i in &s.claimed {
            labels[i as usize] = PointLabel::Ground;
        }
    }
    Ok((
        LabeledFrame {
            frame: frame.clone(),
            labels,
        },
        accepted,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn grid_points(n: usize, z: f64, x0: f64) -> Vec<Point3> {
        (0..n)
            .map(|i| Point3::new(x0 + (i % 10) as f64 * 0.3, (i / 10) as f64 * 0.3, z))
            .collect()
    }

    #[test]
    fn perfect_plane() {
        let pts = grid_points(100, 0.0, 0.0);
        let p = fit_plane_ransac(&pts, 0.05, 200, &mut rng()).unwrap();
        assert!((p.normal[2].abs() - 1.0).abs() < 1e-12);
        assert!(p.offset.abs() < 1e-12);
        assert_eq!(p.inlier_indices.len(), 100);
    }

    #[test]
    fn road_beats_curb_top() {
        // Curb-top rows interleave with road rows so no tilted plane can
        // pick up both.
        let mut pts = grid_points(60, 0.0, 0.0);
        pts.extend(
            grid_points(40, 0.15, 0.0)
                .into_iter()
                .map(|p| Point3::new(p.x, p.y + 0.15, p.z)),
        );
        let p = fit_plane_ransac(&pts, 0.05, 200, &mut rng()).unwrap();
        assert_eq!(p.inlier_indices, (0..60).collect::<Vec<_>>());
        assert!(p.offset.abs() < 1e-9);

        // Exhaustive check over all triples: nothing explains more than 60.
        let mut best = 0;
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                for c in b + 1..pts.len() {
                    if let Some((n, d)) = plane_through(&pts[a], &pts[b], &pts[c]) {
                        let k = pts
                            .iter()
                            .filter(|p| (n[0] * p.x + n[1] * p.y + n[2] * p.z - d).abs() <= 0.05)
                            .count();
                        best = best.max(k);
                    }
                }
            }
        }
        assert_eq!(best, 60);
    }

    #[test]
    fn collinear_and_tiny_inputs() {
        let line: Vec<_> = (0..3).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        assert!(fit_plane_ransac(&line, 0.05, 200, &mut rng()).is_none());
        assert!(fit_plane_ransac(&line[..2], 0.05, 200, &mut rng()).is_none());
    }

    #[test]
    fn normal_angle_gate() {
        let plane = |n: [f64; 3]| PlaneModel {
            normal: n,
            offset: 0.0,
            inlier_indices: vec![],
        };
        assert!(check_normal(&plane([0.0, 0.0, 1.0]), 0.4));
        assert!(!check_normal(&plane([1.0, 0.0, 0.0]), 0.4));
        let a: f64 = 0.39;
        assert!(check_normal(&plane([a.sin(), 0.0, a.cos()]), 0.4));
        assert!(!check_normal(&plane([0.41f64.sin(), 0.0, 0.41f64.cos()]), 0.4));
    }

    /// A 16x360 sweep of a sensor 1.8 m above the plane z = 0, with a wall
    /// at x = `wall` when given.
    fn sweep(wall: Option<f64>, only_wall: bool) -> PointCloudFrame {
        let (h, w) = (16, 360);
        let mut pts = Vec::new();
        let mut ring = Vec::new();
        let mut azi = Vec::new();
        for r in 0..h {
            let e = (-15.0 + 2.0 * r as f64).to_radians();
            for c in 0..w {
                let a = (c as f64 + 0.5) * TAU / w as f64;
                let d = nalgebra::Vector3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
                let mut t = f64::INFINITY;
                if d.z < 0.0 && !only_wall {
                    t = 1.8 / -d.z;
                }
                if let Some(x) = wall {
                    if d.x > 0.0 {
                        let tw = x / d.x;
                        let z = 1.8 + tw * d.z;
                        if (0.0..6.0).contains(&z) && tw < t {
                            t = tw;
                        }
                    }
                }
                if t.is_finite() && t < 80.0 {
                    pts.push(Point3::from_vector(&(d * t)));
                    ring.push(r as u16);
                    azi.push(a);
                }
            }
        }
        PointCloudFrame::new(pts, ring, azi, 0.0, 0).unwrap()
    }

    fn config() -> TraversabilityConfig {
        TraversabilityConfig::for_image(16, 360)
    }

    #[test]
    fn flat_ground_is_all_ground() {
        let f = sweep(None, false);
        let l = detect_traversable(&f, &config()).unwrap();
        assert_eq!(l.ground_count(), f.len());
    }

    #[test]
    fn wall_only_is_all_obstacle() {
        let f = sweep(Some(6.0), true);
        assert!(!f.is_empty());
        let l = detect_traversable(&f, &config()).unwrap();
        assert_eq!(l.ground_count(), 0);
        assert_eq!(l.obstacle_count(), f.len());
    }

    #[test]
    fn empty_frame_gives_empty_labels() {
        let l = detect_traversable(&PointCloudFrame::default(), &config()).unwrap();
        assert!(l.labels.is_empty());
    }

    #[test]
    fn wall_points_are_obstacles_and_road_is_ground() {
        let f = sweep(Some(8.0), false);
        let l = detect_traversable(&f, &config()).unwrap();
        for (p, lab) in f.points.iter().zip(&l.labels) {
            if p.z > 0.3 {
                assert_eq!(*lab, PointLabel::Obstacle, "{p:?}");
            }
            if p.z.abs() < 1e-9 {
                assert_eq!(*lab, PointLabel::Ground, "{p:?}");
            }
        }
    }

    #[test]
    fn execution_modes_agree() {
        let f = sweep(Some(8.0), false);
        let mut c = config();
        c.execution = Execution::Sequential;
        let a = detect_traversable(&f, &c).unwrap();
        c.execution = Execution::Parallel;
        assert_eq!(a, detect_traversable(&f, &c).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn labels_partition_and_ground_lies_on_an_accepted_plane(
            wall in 4.0..20.0f64, seed in any::<u64>(),
            bumps in prop::collection::vec((0usize..5000, -0.4..0.4f64), 0..200),
        ) {
            let mut f = sweep(Some(wall), false);
            for (i, dz) in bumps {
                if i < f.len() {
                    f.points[i].z += dz;
                }
            }
            let mut c = config();
            c.seed = seed;
            let (l, acc) = detect_traversable_detailed(&f, &c).unwrap();
            prop_assert_eq!(l.ground_count() + l.obstacle_count(), f.len());
            for (i, lab) in l.labels.iter().enumerate() {
                if *lab == PointLabel::Ground {
                    prop_assert!(acc.iter().any(|s| s.plane.distance(&f.points[i]) <= c.inlier_threshold));
                }
            }
        }
    }
}
