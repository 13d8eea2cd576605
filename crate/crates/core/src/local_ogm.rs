//! Per-keyframe local map: a 2D occupancy grid built from a virtual scan,
//! plus an altitude Gaussian for each cell that holds ground points.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::geometry::{azimuth_of, Point3, Pose};
use crate::traversability::{LabeledFrame, PointLabel};

#[derive(Debug, Clone, PartialEq)]
pub struct LocalMapConfig {
    pub resolution: f64,
    pub radius: f64,
    pub bins: usize,
    /// Points higher than this above the local ground are ignored.
    pub overhead_clearance: f64,
    /// Ground points within this horizontal range define the local ground height.
    pub ground_search_radius: f64,
    /// Assumed sensor height when a frame has no ground points at all.
    pub fallback_sensor_height: f64,
    pub l_occ: f32,
    pub l_free: f32,
    pub l_max: f32,
    pub sigma_slope: f64,
    pub sigma_floor: f64,
}

impl Default for LocalMapConfig {
    fn default() -> Self {
        let l_occ = (0.7f32 / 0.3).ln();
        LocalMapConfig {
            resolution: 0.1,
            radius: 20.0,
            bins: 720,
            overhead_clearance: 2.0,
            ground_search_radius: 10.0,
            fallback_sensor_height: 1.8,
            l_occ,
            l_free: -l_occ,
            l_max: (0.97f32 / 0.03).ln(),
            sigma_slope: 5f64.to_radians().tan(),
            sigma_floor: 0.1,
        }
    }
}

impl LocalMapConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("resolution", self.resolution),
            ("radius", self.radius),
            ("overhead_clearance", self.overhead_clearance),
            ("sigma_floor", self.sigma_floor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.bins == 0 || self.sigma_slope < 0.0 || !(self.l_max > 0.0) {
            return Err(Error::Config("bins, sigma_slope or l_max out of range".into()));
        }
        Ok(())
    }

    /// Cells per side of the square local grid.
    pub fn extent(&self) -> usize {
        2 * ((self.radius / self.resolution) - 1e-9).ceil() as usize
    }

    pub fn sigma_at(&self, horizontal_distance: f64) -> f64 {
        self.sigma_slope * horizontal_distance + self.sigma_floor
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinKind {
    ObstacleHit,
    FrontierFree,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanBin {
    pub kind: BinKind,
    /// Sensor-frame (x, y); zero for empty bins.
    pub endpoint: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualScan {
    pub bins: Vec<ScanBin>,
}

/// Sensor-frame altitude of the ground around the sensor (median of nearby
/// ground points).
pub fn local_ground_height(labeled: &LabeledFrame, config: &LocalMapConfig) -> f64 {
    let median = |mut zs: Vec<f64>| -> Option<f64> {
        if zs.is_empty() {
            return None;
        }
        zs.sort_by(f64::total_cmp);
        Some(zs[zs.len() / 2])
    };
    let ground: Vec<&Point3> = labeled.points_with(PointLabel::Ground).collect();
    median(
        ground
            .iter()
            .filter(|p| p.horizontal_norm() <= config.ground_search_radius)
            .map(|p| p.z)
            .collect(),
    )
    .or_else(|| median(ground.iter().map(|p| p.z).collect()))
    .unwrap_or(-config.fallback_sensor_height)
}

/// Indices of points low enough to take part in the 2D map.
fn low_points(labeled: &LabeledFrame, config: &LocalMapConfig) -> Vec<usize> {
    let ceiling = local_ground_height(labeled, config) + config.overhead_clearance;
    (0..labeled.frame.len())
        .filter(|&i| labeled.frame.points[i].z <= ceiling)
        .collect()
}

pub fn build_virtual_scan(labeled: &LabeledFrame, config: &LocalMapConfig) -> VirtualScan {
    let n = config.bins;
    let mut nearest_hit = vec![f64::INFINITY; n];
    let mut farthest_free = vec![f64::NEG_INFINITY; n];
    let mut bins = vec![
        ScanBin {
            kind: BinKind::Empty,
            endpoint: [0.0, 0.0],
        };
        n
    ];
    for i in low_points(labeled, config) {
        let p = &labeled.frame.points[i];
        let r = p.horizontal_norm();
        if r > config.radius || r == 0.0 {
            continue;
        }
        let b = ((azimuth_of(p) / TAU * n as f64).floor() as usize) % n;
        match labeled.labels[i] {
            PointLabel::Obstacle if r < nearest_hit[b] => {
                nearest_hit[b] = r;
                bins[b] = ScanBin {
                    kind: BinKind::ObstacleHit,
                    endpoint: [p.x, p.y],
                };
            }
            PointLabel::Ground if nearest_hit[b].is_infinite() && r > farthest_free[b] => {
                farthest_free[b] = r;
                bins[b] = ScanBin {
                    kind: BinKind::FrontierFree,
                    endpoint: [p.x, p.y],
                };
            }
            _ => {}
        }
    }
    VirtualScan { bins }
}

/// 2D Amanatides–Woo walk over unit cells of size `res`, from `a` to `b`,
/// both in sensor-frame meters. Includes the start and end cells.
pub fn grid_ray_2d(a: [f64; 2], b: [f64; 2], res: f64) -> Vec<(i64, i64)> {
    let ua = [a[0] / res, a[1] / res];
    let ub = [b[0] / res, b[1] / res];
    let mut cur = [ua[0].floor() as i64, ua[1].floor() as i64];
    let end = [ub[0].floor() as i64, ub[1].floor() as i64];
    let d = [ub[0] - ua[0], ub[1] - ua[1]];
    let mut step = [0i64; 2];
    let mut t_max = [f64::INFINITY; 2];
    let mut t_delta = [f64::INFINITY; 2];
    for k in 0..2 {
        if d[k] > 0.0 {
            step[k] = 1;
            t_delta[k] = 1.0 / d[k];
            t_max[k] = ((cur[k] + 1) as f64 - ua[k]) / d[k];
        } else if d[k] < 0.0 {
            step[k] = -1;
            t_delta[k] = -1.0 / d[k];
            t_max[k] = (cur[k] as f64 - ua[k]) / d[k];
        }
    }
    let mut out = vec![(cur[0], cur[1])];
    let max_steps = (end[0] - cur[0]).abs() + (end[1] - cur[1]).abs() + 2;
    for _ in 0..max_steps {
        if cur == end {
            break;
        }
        let k = if t_max[0] <= t_max[1] { 0 } else { 1 };
        if t_max[k] > 1.0 {
            break;
        }
        cur[k] += step[k];
        t_max[k] += t_delta[k];
        out.push((cur[0], cur[1]));
    }
    if cur != end {
        out.push((end[0], end[1]));
    }
    out
}

/// Occupancy layer of a local map, row-major with `extent` cells per side.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: f64,
    pub extent: usize,
    pub logodds: Vec<f32>,
}

impl OccupancyGrid {
    /// Local cell holding sensor-frame (x, y), if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        local_cell(x, y, self.resolution, self.extent)
    }

    pub fn get(&self, cx: usize, cy: usize) -> f32 {
        self.logodds[cy * self.extent + cx]
    }
}

fn local_cell(x: f64, y: f64, res: f64, extent: usize) -> Option<(usize, usize)> {
    let half = (extent / 2) as i64;
    let cx = (x / res).floor() as i64 + half;
    let cy = (y / res).floor() as i64 + half;
    (cx >= 0 && cy >= 0 && (cx as usize) < extent && (cy as usize) < extent).then_some((cx as usize, cy as usize))
}

/// Sensor-frame center of a local cell.
pub fn local_cell_center(cx: usize, cy: usize, res: f64, extent: usize) -> [f64; 2] {
    let half = (extent / 2) as f64;
    [(cx as f64 - half + 0.5) * res, (cy as f64 - half + 0.5) * res]
}

pub fn rasterize_ogm(scan: &VirtualScan, config: &LocalMapConfig) -> OccupancyGrid {
    let (res, extent) = (config.resolution, config.extent());
    let half = (extent / 2) as i64;
    // 0 = untouched, 1 = free, 2 = occupied; one update per cell per scan.
    let mut mark = vec![0u8; extent * extent];
    let idx = |c: (i64, i64)| -> Option<usize> {
        let (x, y) = (c.0 + half, c.1 + half);
        (x >= 0 && y >= 0 && (x as usize) < extent && (y as usize) < extent).then(|| y as usize * extent + x as usize)
    };
    for bin in scan.bins.iter().filter(|b| b.kind == BinKind::ObstacleHit) {
        let c = (
            (bin.endpoint[0] / res).floor() as i64,
            (bin.endpoint[1] / res).floor() as i64,
        );
        if let Some(i) = idx(c) {
            mark[i] = 2;
        }
    }
    for bin in scan.bins.iter().filter(|b| b.kind != BinKind::Empty) {
        let cells = grid_ray_2d([0.0, 0.0], bin.endpoint, res);
        let free_until = if bin.kind == BinKind::ObstacleHit {
            cells.len() - 1
        } else {
            cells.len()
        };
        for &c in &cells[..free_until] {
            if let Some(i) = idx(c) {
                if mark[i] == 0 {
                    mark[i] = 1;
                }
            }
        }
    }
    let logodds = mark
        .iter()
        .map(|m| match m {
            1 => config.l_free.clamp(-config.l_max, config.l_max),
            2 => config.l_occ.clamp(-config.l_max, config.l_max),
            _ => 0.0,
        })
        .collect();
    OccupancyGrid {
        resolution: res,
        extent,
        logodds,
    }
}

/// Ground statistics of one local cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightCell {
    /// Mean of the cell's ground points in the sensor frame.
    pub centroid: Point3,
    pub count: u32,
    /// World-frame altitude Gaussian.
    pub gaussian: Gaussian,
    /// Horizontal distance from the sensor to the cell center.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightLayer {
    pub resolution: f64,
    pub extent: usize,
    pub cells: Vec<Option<HeightCell>>,
}

impl HeightLayer {
    pub fn get(&self, cx: usize, cy: usize) -> Option<&HeightCell> {
        self.cells[cy * self.extent + cx].as_ref()
    }
}

pub fn attach_height_gaussians(labeled: &LabeledFrame, pose: &Pose, config: &LocalMapConfig) -> HeightLayer {
    let (res, extent) = (config.resolution, config.extent());
    let mut sums = vec![(Point3::ORIGIN, 0u32); extent * extent];
    for i in low_points(labeled, config) {
        if labeled.labels[i] != PointLabel::Ground {
            continue;
        }
        let p = labeled.frame.points[i];
        if let Some((cx, cy)) = local_cell(p.x, p.y, res, extent) {
            let s = &mut sums[cy * extent + cx];
            s.0 = Point3::new(s.0.x + p.x, s.0.y + p.y, s.0.z + p.z);
            s.1 += 1;
        }
    }
    let cells = sums
        .iter()
        .enumerate()
        .map(|(k, &(sum, n))| {
            if n == 0 {
                return None;
            }
            let c = Point3::new(sum.x / n as f64, sum.y / n as f64, sum.z / n as f64);
            let [x, y] = local_cell_center(k % extent, k / extent, res, extent);
            let distance = x.hypot(y);
            Some(HeightCell {
                centroid: c,
                count: n,
                gaussian: Gaussian {
                    mu: pose.transform_point(&c).z,
                    sigma: config.sigma_at(distance),
                },
                distance,
            })
        })
        .collect();
    HeightLayer {
        resolution: res,
        extent,
        cells,
    }
}

/// A complete keyframe-local map.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOgm {
    pub frame_id: u64,
    pub pose: Pose,
    pub resolution: f64,
    pub extent: usize,
    pub radius: f64,
    pub occupancy: OccupancyGrid,
    pub height: HeightLayer,
    /// Obstacle points within `radius` (horizontal), sensor frame, unfiltered by height.
    pub obstacles: Vec<Point3>,
}

pub fn build_local_ogm(labeled: &LabeledFrame, pose: &Pose, config: &LocalMapConfig) -> Result<LocalOgm> {
    config.validate()?;
    let scan = build_virtual_scan(labeled, config);
    Ok(LocalOgm {
        frame_id: labeled.frame.frame_id,
        pose: *pose,
        resolution: config.resolution,
        extent: config.extent(),
        radius: config.radius,
        occupancy: rasterize_ogm(&scan, config),
        height: attach_height_gaussians(labeled, pose, config),
        obstacles: labeled
            .points_with(PointLabel::Obstacle)
            .filter(|p| p.horizontal_norm() <= config.radius)
            .copied()
            .collect(),
    })
}

impl LocalOgm {
    /// Writes the occupancy layer as a binary graymap: dark = occupied,
    /// light = free, mid-gray = unknown. Row 0 is the +y edge.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let n = self.extent;
        let mut buf = format!("P5\n{n} {n}\n255\n").into_bytes();
        for row in (0..n).rev() {
            for col in 0..n {
                let l = self.occupancy.get(col, row) as f64;
                let p = 1.0 / (1.0 + (-l).exp());
                buf.push((255.0 * (1.0 - p)).round() as u8);
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Writes one line per cell with a height Gaussian: `cx,cy,x,y,mu,sigma,count`
    /// with (x, y) the sensor-frame cell center.
    pub fn write_height_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("cx,cy,x,y,mu,sigma,count\n");
        for cy in 0..self.extent {
            for cx in 0..self.extent {
                if let Some(h) = self.height.get(cx, cy) {
                    let [x, y] = local_cell_center(cx, cy, self.resolution, self.extent);
                    out.push_str(&format!(
                        "{cx},{cy},{x:.3},{y:.3},{:.6},{:.6},{}\n",
                        h.gaussian.mu, h.gaussian.sigma, h.count
                    ));
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
