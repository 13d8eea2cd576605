//! The global atlas: sparse surface columns plus vertical descriptors, fed
//! one posed keyframe at a time.

mod column;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rustc_hash::{FxHashMap, FxHashSet};

pub use column::{
    assign_layer_labels, assign_observation_label, visibility_segments, CellColumn, ColumnState, FusionConfig,
    LabeledRep, Observation, Representative,
};

use crate::codec::{
    build_update_lut, decode_cloud, fuse_into_atlas, trace_ray, Descriptor, PgmFrame, RayEvent, SegmentConfig,
    UpdateLut, VoxelBand,
};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, SurfaceLayer};
use crate::geometry::{Point3, Pose};
use crate::grid::{CellIndex, WorldGrid};
use crate::local_ogm::{local_cell_center, LocalOgm};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasConfig {
    pub resolution: f64,
    pub origin: [f64; 2],
    pub segments: SegmentConfig,
    /// World altitude the vertical band is measured from.
    pub vertical_datum: f64,
    pub fusion: FusionConfig,
    pub p_hit: f64,
    pub p_miss: f64,
    /// Occupancy assigned to cells that hold ground points the 2D grid never swept.
    pub l_free: f32,
    pub execution: Execution,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            resolution: 0.1,
            origin: [0.0, 0.0],
            segments: SegmentConfig::default(),
            vertical_datum: 0.0,
            fusion: FusionConfig::default(),
            p_hit: 0.7,
            p_miss: 0.4,
            l_free: -(0.7f32 / 0.3).ln(),
            execution: Execution::default(),
        }
    }
}

/// One ground cell of a keyframe, in the keyframe's sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundCell {
    pub cx: u16,
    pub cy: u16,
    pub centroid: [f32; 3],
    pub sigma: f32,
    pub distance: f32,
    pub occupancy: f32,
}

/// What the atlas keeps of a keyframe so it can re-fuse it under a new pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub frame_id: u64,
    pub time: f64,
    pub resolution: f64,
    pub ground: Vec<GroundCell>,
    /// Obstacle points, sensor frame.
    pub obstacles: Vec<[f32; 3]>,
}

impl Keyframe {
    pub fn from_local_ogm(local: &LocalOgm, time: f64) -> Self {
        let n = local.extent;
        let mut ground = Vec::new();
        for cy in 0..n {
            for cx in 0..n {
                if let Some(h) = local.height.get(cx, cy) {
                    ground.push(GroundCell {
                        cx: cx as u16,
                        cy: cy as u16,
                        centroid: [h.centroid.x as f32, h.centroid.y as f32, h.centroid.z as f32],
                        sigma: h.gaussian.sigma as f32,
                        distance: h.distance as f32,
                        occupancy: local.occupancy.get(cx, cy),
                    });
                }
            }
        }
        debug_assert!(ground.iter().all(|g| {
            let c = local_cell_center(g.cx as usize, g.cy as usize, local.resolution, n);
            (c[0].hypot(c[1]) - g.distance as f64).abs() < 1e-3
        }));
        Keyframe {
            frame_id: local.frame_id,
            time,
            resolution: local.resolution,
            ground,
            obstacles: local
                .obstacles
                .iter()
                .map(|p| [p.x as f32, p.y as f32, p.z as f32])
                .collect(),
        }
    }
}

/// Inclusive bounding box of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellBounds {
    pub min: CellIndex,
    pub max: CellIndex,
}

impl CellBounds {
    fn of<'a>(cells: impl IntoIterator<Item = &'a CellIndex>) -> Option<Self> {
        let mut it = cells.into_iter();
        let first = *it.next()?;
        Some(it.fold(CellBounds { min: first, max: first }, |b, c| CellBounds {
            min: CellIndex::new(b.min.ix.min(c.ix), b.min.iy.min(c.iy)),
            max: CellIndex::new(b.max.ix.max(c.ix), b.max.iy.max(c.iy)),
        }))
    }

    fn intersects(&self, o: &CellBounds) -> bool {
        self.min.ix <= o.max.ix && o.min.ix <= self.max.ix && self.min.iy <= o.max.iy && o.min.iy <= self.max.iy
    }
}

#[derive(Debug, Clone)]
pub struct KeyframeRecord {
    pub frame_id: u64,
    pub ordinal: u32,
    pub time: f64,
    pub pose: Pose,
    pub data: Arc<Keyframe>,
    /// Cells that received a surface observation from this keyframe.
    pub ground_cells: Vec<CellIndex>,
    /// Bounding box of the cells its obstacle rays touched.
    pub descriptor_bounds: Option<CellBounds>,
}

/// Outcome of one integration, printable as a key=value log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateSummary {
    pub frame_id: u64,
    pub ordinal: u32,
    pub cells_touched: usize,
    pub layers_created: usize,
    pub layers_merged: usize,
    pub descriptor_cells: usize,
    pub elapsed_ms: f64,
}

impl fmt::Display for UpdateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frame_id={} ordinal={} cells_touched={} layers_created={} layers_merged={} descriptor_cells={} elapsed_ms={:.3}",
            self.frame_id,
            self.ordinal,
            self.cells_touched,
            self.layers_created,
            self.layers_merged,
            self.descriptor_cells,
            self.elapsed_ms
        )
    }
}

#[derive(Debug, Clone)]
pub struct Atlas {
    config: AtlasConfig,
    grid: WorldGrid,
    lut: UpdateLut,
    columns: FxHashMap<CellIndex, CellColumn>,
    descriptors: FxHashMap<CellIndex, Descriptor>,
    keyframes: Vec<KeyframeRecord>,
    by_frame: FxHashMap<u64, u32>,
    read_only: bool,
    stored_keyframes: u64,
}

impl Atlas {
    pub fn new(config: AtlasConfig) -> Result<Self> {
        let grid = WorldGrid::new(config.resolution, config.origin)?;
        config.segments.validate()?;
        if !config.vertical_datum.is_finite() {
            return Err(Error::NonFinite("vertical datum".into()));
        }
        if !(config.fusion.epsilon > 0.0 && config.fusion.epsilon <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 1], got {}",
                config.fusion.epsilon
            )));
        }
        if config.fusion.max_observations_per_segment == 0 {
            return Err(Error::Config("observation cap must be at least 1".into()));
        }
        let lut = build_update_lut(config.p_hit, config.p_miss)?;
        Ok(Atlas {
            config,
            grid,
            lut,
            columns: FxHashMap::default(),
            descriptors: FxHashMap::default(),
            keyframes: Vec::new(),
            by_frame: FxHashMap::default(),
            read_only: false,
            stored_keyframes: 0,
        })
    }

    /// Rebuilds a finished map from stored layers and descriptors. The result
    /// has no keyframe history and rejects further integration.
    pub fn from_stored(
        config: AtlasConfig,
        columns: Vec<(CellIndex, Vec<SurfaceLayer>)>,
        descriptors: Vec<(CellIndex, Descriptor)>,
        keyframe_count: u64,
    ) -> Result<Self> {
        let mut a = Atlas::new(config)?;
        a.columns = columns
            .into_iter()
            .filter(|(_, l)| !l.is_empty())
            .map(|(c, l)| (c, CellColumn::from_layers(l)))
            .collect();
        a.descriptors = descriptors.into_iter().collect();
        a.read_only = true;
        a.stored_keyframes = keyframe_count;
        Ok(a)
    }

    pub fn config(&self) -> &AtlasConfig {
        &self.config
    }

    pub fn grid(&self) -> &WorldGrid {
        &self.grid
    }

    pub fn resolution(&self) -> f64 {
        self.grid.resolution
    }

    pub fn band(&self) -> VoxelBand {
        VoxelBand::new(self.grid, &self.config.segments, self.config.vertical_datum)
    }

    pub fn lut(&self) -> &UpdateLut {
        &self.lut
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    pub fn columns(&self) -> &FxHashMap<CellIndex, CellColumn> {
        &self.columns
    }

    pub fn column(&self, cell: CellIndex) -> Option<&CellColumn> {
        self.columns.get(&cell)
    }

    pub fn descriptors(&self) -> &FxHashMap<CellIndex, Descriptor> {
        &self.descriptors
    }

    pub fn keyframe(&self, frame_id: u64) -> Option<&KeyframeRecord> {
        self.by_frame.get(&frame_id).map(|&o| &self.keyframes[o as usize])
    }

    pub fn keyframes(&self) -> &[KeyframeRecord] {
        &self.keyframes
    }

    pub fn keyframe_count(&self) -> u64 {
        self.keyframes.len() as u64 + self.stored_keyframes
    }

    /// Decoded obstacle cloud of the whole map.
    pub fn decode_obstacles(&self, threshold: u8) -> Vec<Point3> {
        decode_cloud(&self.descriptors, &self.band(), threshold)
    }

    /// Decoded obstacle cloud of cells whose center lies within `radius` of (x, y).
    pub fn decode_obstacles_within(&self, x: f64, y: f64, radius: f64, threshold: u8) -> Vec<Point3> {
        let r2 = radius * radius;
        let inside = |c: &CellIndex| {
            let [cx, cy] = self.grid.cell_center(*c);
            (cx - x).powi(2) + (cy - y).powi(2) <= r2
        };
        let lo = self.grid.cell_of(x - radius, y - radius);
        let hi = self.grid.cell_of(x + radius, y + radius);
        let span = ((hi.ix - lo.ix + 1) as f64) * ((hi.iy - lo.iy + 1) as f64);
        let mut near: Vec<(&CellIndex, &Descriptor)> = if span < self.descriptors.len() as f64 {
            (lo.ix..=hi.ix)
                .flat_map(|ix| (lo.iy..=hi.iy).map(move |iy| CellIndex::new(ix, iy)))
                .filter_map(|c| self.descriptors.get_key_value(&c))
                .filter(|(c, _)| inside(c))
                .collect()
        } else {
            self.descriptors.iter().filter(|(c, _)| inside(c)).collect()
        };
        near.sort_unstable_by_key(|(c, _)| **c);
        decode_cloud(near, &self.band(), threshold)
    }

    /// Low-level entry point: adds one observation to a cell and refreshes
    /// that column.
    pub fn register_observation(&mut self, cell: CellIndex, obs: Observation) -> Result<()> {
        if self.read_only {
            return Err(Error::ReadOnly);
        }
        let cap = self.config.fusion.max_observations_per_segment;
        self.columns.entry(cell).or_default().insert(obs, cap);
        let latest = self.latest_ordinal().max(obs.ordinal);
        self.recompute(&[cell], latest)?;
        Ok(())
    }

    fn latest_ordinal(&self) -> u32 {
        self.keyframes.len().saturating_sub(1) as u32
    }

    /// Integrates a keyframe's local map at `pose`. Keyframe times must
    /// strictly increase.
    pub fn integrate_keyframe(&mut self, local: &LocalOgm, pose: &Pose, time: f64) -> Result<UpdateSummary> {
        self.integrate(Keyframe::from_local_ogm(local, time), pose)
    }

    pub fn integrate(&mut self, keyframe: Keyframe, pose: &Pose) -> Result<UpdateSummary> {
        let start = Instant::now();
        if self.read_only {
            return Err(Error::ReadOnly);
        }
        let res = self.grid.resolution;
        if (keyframe.resolution - res).abs() > 1e-12 * res {
            return Err(Error::ResolutionMismatch {
                atlas: res,
                local: keyframe.resolution,
            });
        }
        if self.by_frame.contains_key(&keyframe.frame_id) {
            return Err(Error::DuplicateKeyframe(keyframe.frame_id));
        }
        if !keyframe.time.is_finite() {
            return Err(Error::NonFinite("keyframe time".into()));
        }
        if let Some(last) = self.keyframes.last() {
            if keyframe.time <= last.time {
                return Err(Error::NonMonotonicTime {
                    time: keyframe.time,
                    previous: last.time,
                });
            }
        }
        let ordinal = self.keyframes.len() as u32;
        let observations = self.ground_observations(&keyframe, pose, ordinal);
        let cap = self.config.fusion.max_observations_per_segment;
        for (cell, obs) in &observations {
            self.columns.entry(*cell).or_default().insert(*obs, cap);
        }
        let ground_cells: Vec<CellIndex> = observations.iter().map(|(c, _)| *c).collect();
        let (created, merged) = self.recompute(&ground_cells, ordinal)?;

        let pgm = self.encode_frame(&keyframe, pose)?;
        let descriptor_bounds = CellBounds::of(pgm.cells());
        let descriptor_cells = fuse_into_atlas(&mut self.descriptors, &pgm, self.config.segments.n_segments)?;

        let frame_id = keyframe.frame_id;
        self.by_frame.insert(frame_id, ordinal);
        self.keyframes.push(KeyframeRecord {
            frame_id,
            ordinal,
            time: keyframe.time,
            pose: *pose,
            data: Arc::new(keyframe),
            ground_cells: ground_cells.clone(),
            descriptor_bounds,
        });
        let summary = UpdateSummary {
            frame_id,
            ordinal,
            cells_touched: ground_cells.len(),
            layers_created: created,
            layers_merged: merged,
            descriptor_cells,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::debug!("{summary}");
        Ok(summary)
    }

    /// World-cell observations of a keyframe. When several local cells land
    /// in one world cell, the one closest to the sensor wins.
    fn ground_observations(&self, kf: &Keyframe, pose: &Pose, ordinal: u32) -> Vec<(CellIndex, Observation)> {
        let mut best: FxHashMap<CellIndex, Observation> = FxHashMap::default();
        for g in &kf.ground {
            let c = Point3::new(g.centroid[0] as f64, g.centroid[1] as f64, g.centroid[2] as f64);
            let w = pose.transform_point(&c);
            let cell = self.grid.cell_of(w.x, w.y);
            let obs = Observation {
                ordinal,
                gaussian: Gaussian {
                    mu: w.z,
                    sigma: g.sigma as f64,
                },
                distance: g.distance as f64,
                occupancy: if g.occupancy == 0.0 {
                    self.config.l_free
                } else {
                    g.occupancy
                },
            };
            best.entry(cell)
                .and_modify(|o| {
                    if obs.distance < o.distance {
                        *o = obs
                    }
                })
                .or_insert(obs);
        }
        let mut out: Vec<_> = best.into_iter().collect();
        out.sort_by_key(|(c, _)| *c);
        out
    }

    fn world_obstacles(kf: &Keyframe, pose: &Pose) -> Vec<Point3> {
        kf.obstacles
            .iter()
            .map(|p| pose.transform_point(&Point3::new(p[0] as f64, p[1] as f64, p[2] as f64)))
            .collect()
    }

    fn encode_frame(&self, kf: &Keyframe, pose: &Pose) -> Result<PgmFrame> {
        let mut pgm = PgmFrame::new(pose.origin(), self.config.segments.n_segments);
        crate::codec::integrate_frame_obstacles(&mut pgm, &self.band(), &Self::world_obstacles(kf, pose), &self.lut)?;
        Ok(pgm)
    }

    /// Recomputes the given columns (in parallel, read-only), then stores the
    /// results. Returns (layers created, layers merged away).
    fn recompute(&mut self, cells: &[CellIndex], latest: u32) -> Result<(usize, usize)> {
        let cfg = &self.config.fusion;
        let columns = &self.columns;
        let states = par::map_slice(self.config.execution, cells, |c| match columns.get(c) {
            Some(col) => col.compute(cfg, latest).map(|s| Some((col.layers.len(), s))),
            None => Ok(None),
        });
        let (mut created, mut merged) = (0, 0);
        for (cell, state) in cells.iter().zip(states) {
            let Some((before, state)) = state? else { continue };
            let after = state.layers.len();
            created += after.saturating_sub(before);
            merged += before.saturating_sub(after);
            if after == 0 {
                self.columns.remove(cell);
            } else {
                self.columns.get_mut(cell).unwrap().apply(state);
            }
        }
        Ok((created, merged))
    }

    /// Moves one keyframe to a corrected pose and repairs every cell it
    /// affected. Cells outside its old and new footprints are untouched.
    pub fn reintegrate_on_pose_update(&mut self, frame_id: u64, new_pose: &Pose) -> Result<()> {
        self.reintegrate_poses(&[(frame_id, *new_pose)])
    }

    /// Applies a batch of pose corrections (e.g. after a loop closure) with a
    /// single repair pass.
    pub fn reintegrate_poses(&mut self, updates: &[(u64, Pose)]) -> Result<()> {
        if self.read_only {
            return Err(Error::ReadOnly);
        }
        let mut moved: Vec<(u32, Pose)> = Vec::new();
        for (id, pose) in updates {
            let &o = self.by_frame.get(id).ok_or(Error::UnknownKeyframe(*id))?;
            if self.keyframes[o as usize].pose != *pose {
                moved.retain(|(m, _)| *m != o);
                moved.push((o, *pose));
            }
        }
        if moved.is_empty() {
            return Ok(());
        }
        let band = self.band();
        let cap = self.config.fusion.max_observations_per_segment;
        let mut column_cells: BTreeSet<CellIndex> = BTreeSet::new();
        let mut descriptor_cells: FxHashSet<CellIndex> = FxHashSet::default();

        for &(o, pose) in &moved {
            let rec = &self.keyframes[o as usize];
            let data = Arc::clone(&rec.data);
            let old_pose = rec.pose;
            let old_cells = rec.ground_cells.clone();
            for c in &old_cells {
                if let Some(col) = self.columns.get_mut(c) {
                    col.remove(o);
                }
                column_cells.insert(*c);
            }
            let observations = self.ground_observations(&data, &pose, o);
            for (cell, obs) in &observations {
                self.columns.entry(*cell).or_default().insert(*obs, cap);
                column_cells.insert(*cell);
            }
            let mut new_touched = FxHashSet::default();
            for (p, origin) in [(old_pose, false), (pose, true)] {
                let from = p.origin();
                for q in Self::world_obstacles(&data, &p) {
                    trace_ray(&band, &from, &q, |c, _, _| {
                        descriptor_cells.insert(c);
                        if origin {
                            new_touched.insert(c);
                        }
                    });
                }
            }
            let rec = &mut self.keyframes[o as usize];
            rec.pose = pose;
            rec.ground_cells = observations.iter().map(|(c, _)| *c).collect();
            rec.descriptor_bounds = CellBounds::of(&new_touched);
        }

        let cells: Vec<CellIndex> = column_cells.into_iter().collect();
        let latest = self.latest_ordinal();
        self.recompute(&cells, latest)?;
        self.replay_descriptors(&descriptor_cells);
        Ok(())
    }

    /// Rebuilds the descriptors of `cells` by replaying every overlapping
    /// keyframe's rays in integration order.
    fn replay_descriptors(&mut self, cells: &FxHashSet<CellIndex>) {
        let Some(bounds) = CellBounds::of(cells) else { return };
        for c in cells {
            self.descriptors.remove(c);
        }
        let band = self.band();
        let n = self.config.segments.n_segments;
        let lut = &self.lut;
        let descriptors = &mut self.descriptors;
        for rec in &self.keyframes {
            if !rec.descriptor_bounds.is_some_and(|b| b.intersects(&bounds)) {
                continue;
            }
            let from = rec.pose.origin();
            for q in Self::world_obstacles(&rec.data, &rec.pose) {
                trace_ray(&band, &from, &q, |c, seg, ev: RayEvent| {
                    if cells.contains(&c) {
                        let d = descriptors.entry(c).or_insert_with(|| Descriptor::new(n));
                        d.set(seg, lut.apply(d.get(seg), ev));
                    }
                });
            }
        }
    }
}

/// Lists every difference between two atlases' surfaces and descriptors;
/// layer values are compared within `tol`, codes exactly. Empty = equal.
pub fn atlas_differences(a: &Atlas, b: &Atlas, tol: f64) -> Vec<String> {
    let mut out = Vec::new();
    let keys: BTreeSet<CellIndex> = a.columns.keys().chain(b.columns.keys()).copied().collect();
    for k in keys {
        match (a.columns.get(&k), b.columns.get(&k)) {
            (Some(x), Some(y)) => {
                if x.layers.len() != y.layers.len() {
                    out.push(format!("{k:?}: {} vs {} layers", x.layers.len(), y.layers.len()));
                    continue;
                }
                for (i, (p, q)) in x.layers.iter().zip(&y.layers).enumerate() {
                    let close = (p.mu - q.mu).abs() <= tol
                        && (p.sigma - q.sigma).abs() <= tol
                        && p.n_obs == q.n_obs
                        && p.label == q.label
                        && ((p.occupancy - q.occupancy).abs() as f64) <= tol.max(1e-6);
                    if !close {
                        out.push(format!("{k:?} layer {i}: {p:?} vs {q:?}"));
                    }
                }
            }
            (x, y) => out.push(format!("{k:?}: present {} vs {}", x.is_some(), y.is_some())),
        }
    }
    let keys: BTreeSet<CellIndex> = a.descriptors.keys().chain(b.descriptors.keys()).copied().collect();
    for k in keys {
        let (x, y) = (a.descriptors.get(&k), b.descriptors.get(&k));
        if x != y {
            out.push(format!("{k:?}: descriptor {x:?} vs {y:?}"));
        }
    }
    out
}
